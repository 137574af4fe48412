//! Lossless speculative decoding: draft, verify, accept.
//!
//! Each step runs ONE base forward over `[last_token, draft...]`,
//! accepts the longest draft prefix that exactly matches the base
//! model's own greedy picks, and always emits one extra "bonus" token —
//! the base's pick at the first mismatch (or after a full match). The
//! emitted stream is therefore byte-identical to plain greedy decoding
//! for ANY draft weights; draft quality only changes how fast it
//! arrives.
//!
//! Cache discipline: with an accepted context of `c` tokens, every
//! cache layer holds exactly `c - 1` rows — the newest token has never
//! been forwarded, so its K/V appears only during the next verify.
//! After verification the base layers are rolled back to the accepted
//! length and the drafter ingests the taps of the accepted rows, so a
//! mid-run cache is bitwise equal to a fresh prefill of the same
//! context.
//!
//! The final step may overshoot `n`; the returned tokens are trimmed
//! but [`AcceptanceStats`] counts pre-trim emissions, so `a` reflects
//! the drafter, not the stopping point. Total base forwards == `steps`
//! (the one-off prompt prefill is not a verify step).

use crate::analytics;
use crate::baselm::{greedy_next, BaseLM, HiddenStateTaps};
use crate::error::{Error, Result};
use crate::kvcache::KVCache;
use crate::scalar::Scalar;
use crate::specformer::SpecFormer;

/// A draft-token source driven by the verification loop.
///
/// `observe` receives the hidden-state taps of the newly accepted rows
/// (in order, ending at the newest accepted position that has been
/// forwarded) plus the shared cache, whose last layer is reserved for
/// the drafter; it returns the next `draft_len()` proposals.
pub trait Drafter<S: Scalar> {
    fn draft_len(&self) -> usize;
    fn observe(
        &mut self,
        base: &BaseLM<S>,
        taps: &HiddenStateTaps<S>,
        cache: &mut KVCache<S>,
    ) -> Result<Vec<usize>>;
}

impl<S: Scalar> Drafter<S> for SpecFormer<S> {
    fn draft_len(&self) -> usize {
        self.config().l_d
    }

    fn observe(
        &mut self,
        base: &BaseLM<S>,
        taps: &HiddenStateTaps<S>,
        cache: &mut KVCache<S>,
    ) -> Result<Vec<usize>> {
        self.generate_draft(base, taps, cache)
    }
}

impl<S: Scalar> Drafter<S> for &SpecFormer<S> {
    fn draft_len(&self) -> usize {
        self.config().l_d
    }

    fn observe(
        &mut self,
        base: &BaseLM<S>,
        taps: &HiddenStateTaps<S>,
        cache: &mut KVCache<S>,
    ) -> Result<Vec<usize>> {
        self.generate_draft(base, taps, cache)
    }
}

/// A perfect drafter for testing the acceptance ceiling: it proposes
/// the base model's own greedy continuation (precomputed), so every
/// draft token is accepted and each step emits `l_d + 1` tokens. It
/// tracks its position from the tap rows it is shown and never touches
/// the cache.
pub struct OracleDrafter {
    continuation: Vec<usize>,
    seen_rows: usize,
    l_d: usize,
}

impl OracleDrafter {
    /// Precomputes the greedy continuation for a planned
    /// `sd_decode_with(base, _, prompt, n)` run.
    pub fn new<S: Scalar>(
        base: &BaseLM<S>,
        prompt: &[usize],
        n: usize,
        l_d: usize,
    ) -> Result<Self> {
        if l_d == 0 {
            return Err(Error::InvalidParam {
                name: "l_d",
                detail: "draft length must be >= 1".into(),
            });
        }
        let tail = base.decode_greedy(prompt, n + l_d)?;
        let mut continuation = prompt.to_vec();
        continuation.extend(tail);
        Ok(OracleDrafter {
            continuation,
            seen_rows: 0,
            l_d,
        })
    }
}

impl<S: Scalar> Drafter<S> for OracleDrafter {
    fn draft_len(&self) -> usize {
        self.l_d
    }

    fn observe(
        &mut self,
        _base: &BaseLM<S>,
        taps: &HiddenStateTaps<S>,
        _cache: &mut KVCache<S>,
    ) -> Result<Vec<usize>> {
        self.seen_rows += taps.seq_len();
        // rows cover context positions 0..seen-1; the accepted context
        // is one longer (its newest token is not yet forwarded)
        let ctx = self.seen_rows + 1;
        Ok(self.continuation[ctx..ctx + self.l_d].to_vec())
    }
}

/// One verified step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepResult {
    pub drafted: Vec<usize>,
    /// Longest exactly-matching draft prefix, in `0..=l_d`.
    pub matched: usize,
    /// `matched` draft tokens plus the bonus token: always `matched+1`
    /// tokens, always a prefix of the base's greedy continuation.
    pub emitted: Vec<usize>,
}

/// Aggregate acceptance statistics of one decoding run.
#[derive(Clone, Debug, PartialEq)]
pub struct AcceptanceStats {
    pub steps: usize,
    /// Pre-trim emission count (the final step may overshoot `n`).
    pub tokens_emitted: usize,
    /// Mean emitted tokens per step, bonus token included:
    /// `a == 1 + mean(matched)`, so `1 <= a <= l_d + 1`.
    pub a: f64,
    /// `matched_hist[m]` counts steps with exactly `m` matches;
    /// length `l_d + 1`, sums to `steps`.
    pub matched_hist: Vec<usize>,
    /// `a * l_d / k`.
    pub kappa: f64,
    pub l_d: usize,
    /// Draft token budget; chain drafting uses `k == l_d` (so
    /// `kappa == a`).
    pub k: usize,
}

/// One verification forward over `[last_token, draft...]`, returning
/// the base's greedy pick at every position: index 0 is the next token
/// after the accepted context, index `i > 0` follows the hypothetical
/// prefix extended with `draft[..i]`. The cache is left extended by
/// `draft.len() + 1` rows; the caller rolls it back to the accepted
/// length.
pub fn verify<S: Scalar>(
    base: &BaseLM<S>,
    cache: &mut KVCache<S>,
    last_token: usize,
    draft: &[usize],
) -> Result<Vec<usize>> {
    Ok(verify_forward(base, cache, last_token, draft)?.0)
}

fn verify_forward<S: Scalar>(
    base: &BaseLM<S>,
    cache: &mut KVCache<S>,
    last_token: usize,
    draft: &[usize],
) -> Result<(Vec<usize>, HiddenStateTaps<S>)> {
    let mut tokens = Vec::with_capacity(draft.len() + 1);
    tokens.push(last_token);
    tokens.extend_from_slice(draft);
    let (logits, taps) = base.forward(&tokens, cache, true)?;
    let v = base.config().vocab;
    let greedy = (0..tokens.len())
        .map(|i| greedy_next(&logits.data()[i * v..(i + 1) * v]))
        .collect();
    Ok((greedy, taps.expect("taps requested")))
}

/// Longest-exact-prefix acceptance: `matched` is the count of leading
/// positions with `draft[i] == base_greedy[i]`; the emitted tokens are
/// `base_greedy[..=matched]` — the matched drafts (equal to the base's
/// own picks) plus one bonus token.
pub fn accept(draft: &[usize], base_greedy: &[usize]) -> StepResult {
    debug_assert_eq!(base_greedy.len(), draft.len() + 1);
    let mut matched = 0;
    while matched < draft.len() && draft[matched] == base_greedy[matched] {
        matched += 1;
    }
    StepResult {
        drafted: draft.to_vec(),
        matched,
        emitted: base_greedy[..=matched].to_vec(),
    }
}

/// Aggregates step results; `k` is the draft-token budget (`k >= l_d`,
/// chain drafting uses `k == l_d`).
pub fn compute_stats(results: &[StepResult], l_d: usize, k: usize) -> Result<AcceptanceStats> {
    if results.is_empty() {
        return Err(Error::InvalidParam {
            name: "results",
            detail: "cannot aggregate zero steps".into(),
        });
    }
    if l_d == 0 || k < l_d {
        return Err(Error::InvalidParam {
            name: "k",
            detail: format!("need k >= l_d >= 1, got k={k}, l_d={l_d}"),
        });
    }
    let mut hist = vec![0usize; l_d + 1];
    let mut tokens = 0usize;
    for r in results {
        if r.matched > l_d || r.emitted.len() != r.matched + 1 {
            return Err(Error::InvalidParam {
                name: "results",
                detail: format!(
                    "inconsistent step: matched {} of l_d {l_d}, emitted {}",
                    r.matched,
                    r.emitted.len()
                ),
            });
        }
        hist[r.matched] += 1;
        tokens += r.emitted.len();
    }
    let a = tokens as f64 / results.len() as f64;
    Ok(AcceptanceStats {
        steps: results.len(),
        tokens_emitted: tokens,
        a,
        matched_hist: hist,
        kappa: analytics::kappa(a, l_d, k)?,
        l_d,
        k,
    })
}

/// Speculative greedy decoding with a SpecFormer drafter. The output
/// equals `base.decode_greedy(prompt, n)` exactly, for any draft
/// weights.
pub fn sd_decode<S: Scalar>(
    base: &BaseLM<S>,
    sf: &SpecFormer<S>,
    prompt: &[usize],
    n: usize,
) -> Result<(Vec<usize>, AcceptanceStats)> {
    sf.validate_against(base)?;
    let mut adapter = sf;
    sd_decode_with(base, &mut adapter, prompt, n)
}

/// Speculative greedy decoding with any drafter.
///
/// Requires a nonempty prompt and
/// `prompt.len() + n + l_d + 1 <= max_seq` (drafts are never shortened
/// near the budget, so the last verify may need the full window).
/// `n == 0` returns an empty output with zeroed stats.
pub fn sd_decode_with<S: Scalar, D: Drafter<S> + ?Sized>(
    base: &BaseLM<S>,
    drafter: &mut D,
    prompt: &[usize],
    n: usize,
) -> Result<(Vec<usize>, AcceptanceStats)> {
    let l_d = drafter.draft_len();
    if l_d == 0 {
        return Err(Error::InvalidParam {
            name: "l_d",
            detail: "draft length must be >= 1".into(),
        });
    }
    if prompt.is_empty() {
        return Err(Error::InvalidParam {
            name: "prompt",
            detail: "prompt must be nonempty".into(),
        });
    }
    let max_seq = base.config().max_seq;
    let needed = prompt.len() + n + l_d + 1;
    if needed > max_seq {
        return Err(Error::CacheOverflow {
            needed,
            capacity: max_seq,
        });
    }
    for &t in prompt {
        if t >= base.config().vocab {
            return Err(Error::TokenRange {
                id: t,
                vocab: base.config().vocab,
            });
        }
    }
    if n == 0 {
        return Ok((
            Vec::new(),
            AcceptanceStats {
                steps: 0,
                tokens_emitted: 0,
                a: 0.0,
                matched_hist: vec![0; l_d + 1],
                kappa: 0.0,
                l_d,
                k: l_d,
            },
        ));
    }

    let m = prompt.len();
    let mut cache = base.new_cache()?;
    let mut ctx = prompt.to_vec();
    let mut results: Vec<StepResult> = Vec::new();

    // Prefill all but the newest prompt token and hand its taps to the
    // drafter; a single-token prompt starts with an empty draft instead.
    let mut draft = if m >= 2 {
        let (_, taps) = base.forward(&prompt[..m - 1], &mut cache, true)?;
        drafter.observe(base, &taps.expect("taps requested"), &mut cache)?
    } else {
        Vec::new()
    };

    loop {
        let last = *ctx.last().expect("nonempty context");
        let (greedy, taps) = verify_forward(base, &mut cache, last, &draft)?;
        let step = accept(&draft, &greedy);
        ctx.extend_from_slice(&step.emitted);
        let matched = step.matched;
        results.push(step);
        // roll the base layers back to the accepted context (minus the
        // newest token, which has not been forwarded)
        cache.truncate(ctx.len() - 1)?;
        if ctx.len() - m >= n {
            break;
        }
        let accepted_taps = taps.slice_rows(0, matched + 1)?;
        draft = drafter.observe(base, &accepted_taps, &mut cache)?;
    }

    let stats = compute_stats(&results, l_d, l_d)?;
    ctx.truncate(m + n);
    Ok((ctx.split_off(m), stats))
}
