//! Training: base-LM pretraining, self-distillation, and draft-model
//! training with slot-sequential gradient accumulation.
//!
//! The optimizer is decoupled-weight-decay Adam with a cosine-annealed
//! learning rate behind a linear warmup. The default `adam_eps` of
//! `2e-4` is unusually large for Adam; it is kept as the recipe default
//! but exposed as an explicit config knob, and nothing correctness-
//! critical depends on its value.
//!
//! Draft training keeps the base model completely frozen: tap features
//! enter the graph as constants (precomputed once per corpus entry),
//! and the head/final norm enter as constants, so no base tensor can
//! ever receive a gradient, making freezing bit-exact by construction.
//!
//! `grad_accum_lmhead` materializes slot logits one draft slot at a
//! time: each slot's cross-entropy is backpropagated only to that
//! slot's slice of the shared states `E` (weighted by its share of
//! valid targets), the slices are assembled into one upstream gradient
//! for `E`, and a single trunk backward finishes the job. Peak live
//! logits memory is `batch·seq·vocab` instead of
//! `batch·seq·l_d·vocab`, and the result is exactly the monolithic
//! gradient.

use crate::baselm::{BaseLM, BaseLMConfig, IGNORE};
use crate::checkpoint;
use crate::corpus::{Corpus, CorpusSource};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::param::Parameter;
use crate::prng::Prng;
use crate::scalar::Scalar;
use crate::specformer::{slot_targets, slot_targets_for, SpecFormer};
use crate::tensor::Tensor;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Sequences per microbatch.
    pub batch_size: usize,
    /// Microbatches accumulated per optimizer step.
    pub grad_accum: usize,
    pub epochs: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    /// Fraction of total steps spent in linear warmup, in `[0, 1)`.
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Adam epsilon. The recipe default 2e-4 is unusually large; it is
    /// a deliberate, documented knob rather than a hidden constant.
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            grad_accum: 1,
            epochs: 1,
            max_lr: 3e-3,
            min_lr: 1e-5,
            warmup_frac: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 2e-4,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |name: &'static str, detail: String| -> Result<()> {
            Err(Error::InvalidParam { name, detail })
        };
        if self.batch_size == 0 {
            return fail("batch_size", "must be >= 1".into());
        }
        if self.grad_accum == 0 {
            return fail("grad_accum", "must be >= 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs", "must be >= 1".into());
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.max_lr) {
            return fail(
                "min_lr",
                format!("need 0 < min_lr <= max_lr, got {} vs {}", self.min_lr, self.max_lr),
            );
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return fail("warmup_frac", format!("need [0, 1), got {}", self.warmup_frac));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidParam {
                    name,
                    detail: format!("need [0, 1), got {b}"),
                });
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps", format!("need > 0, got {}", self.adam_eps));
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay", format!("need >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate with linear warmup: rises linearly
/// from 0 to `max_lr` over `floor(warmup_frac·total)` steps, then
/// `min_lr + (max_lr - min_lr)·(1 + cos(pi·progress))/2` down to
/// exactly `min_lr` at `step == total`.
pub fn lr_schedule(step: usize, total: usize, cfg: &TrainConfig) -> Result<f64> {
    cfg.validate()?;
    if total == 0 || step > total {
        return Err(Error::InvalidParam {
            name: "step",
            detail: format!("need 0 <= step <= total with total >= 1, got {step}/{total}"),
        });
    }
    let warmup = (cfg.warmup_frac * total as f64).floor() as usize;
    if step < warmup {
        return Ok(cfg.max_lr * step as f64 / warmup as f64);
    }
    let denom = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / denom;
    Ok(cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Decoupled-weight-decay Adam. State is kept in double precision and
/// keyed by position in the parameter list, which must stay stable
/// across steps.
pub struct AdamW {
    slots: Vec<AdamSlot>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new<S: Scalar>(params: &[&Parameter<S>], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let slots = params
            .iter()
            .map(|p| AdamSlot {
                m: vec![0.0; p.value().numel()],
                v: vec![0.0; p.value().numel()],
            })
            .collect();
        Ok(AdamW {
            slots,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        })
    }

    /// One update from the parameters' accumulated gradients. Frozen
    /// parameters are skipped entirely (no decay, no state update).
    /// Gradients are left untouched; callers zero them afterwards.
    pub fn step<S: Scalar>(&mut self, params: &mut [&mut Parameter<S>], lr: f64) -> Result<()> {
        if params.len() != self.slots.len() {
            return Err(Error::Shape {
                op: "adamw",
                detail: format!("{} params vs {} state slots", params.len(), self.slots.len()),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (param, slot) in params.iter_mut().zip(&mut self.slots) {
            if param.value().numel() != slot.m.len() {
                return Err(Error::Shape {
                    op: "adamw",
                    detail: format!(
                        "param of {} elements vs state of {}",
                        param.value().numel(),
                        slot.m.len()
                    ),
                });
            }
            if !param.trainable() {
                continue;
            }
            let grads: Vec<f64> = param.grad().data().iter().map(|&g| g.to_f64()).collect();
            for (j, g) in grads.iter().enumerate() {
                slot.m[j] = self.beta1 * slot.m[j] + (1.0 - self.beta1) * g;
                slot.v[j] = self.beta2 * slot.v[j] + (1.0 - self.beta2) * g * g;
            }
            let decay = 1.0 - lr * self.weight_decay;
            let (m, v) = (&slot.m, &slot.v);
            let (eps, b1, b2) = (self.eps, bc1, bc2);
            param.update_value(|j, x| {
                let mhat = m[j] / b1;
                let vhat = v[j] / b2;
                let next = x.to_f64() * decay - lr * mhat / (vhat.sqrt() + eps);
                *x = S::from_f64(next);
            });
        }
        Ok(())
    }
}

fn uniform_len(corpus: &Corpus) -> Result<usize> {
    let t = corpus
        .entries
        .first()
        .map(|e| e.len())
        .ok_or_else(|| Error::InvalidParam {
            name: "corpus",
            detail: "cannot train on an empty corpus".into(),
        })?;
    if corpus.entries.iter().any(|e| e.len() != t) {
        return Err(Error::InvalidParam {
            name: "corpus",
            detail: "training batches need equal-length entries".into(),
        });
    }
    Ok(t)
}

/// Deterministic epoch order: a shuffled index list per epoch.
fn epoch_order(prng: &Prng, epoch: usize, n: usize) -> Result<Vec<usize>> {
    prng.derive(epoch as u64).distinct(n, n)
}

/// Pretrains a fresh base model on next-token cross-entropy over the
/// corpus. Returns the model and the per-optimizer-step loss trace.
pub fn train_base<S: Scalar>(
    corpus: &Corpus,
    base_cfg: &BaseLMConfig,
    cfg: &TrainConfig,
) -> Result<(BaseLM<S>, Vec<f64>)> {
    cfg.validate()?;
    if corpus.vocab != base_cfg.vocab {
        return Err(Error::VocabMismatch {
            left: corpus.vocab,
            right: base_cfg.vocab,
        });
    }
    let t_len = uniform_len(corpus)?;
    if t_len > base_cfg.max_seq {
        return Err(Error::CacheOverflow {
            needed: t_len,
            capacity: base_cfg.max_seq,
        });
    }
    let mut base = BaseLM::init(base_cfg.clone(), cfg.seed)?;
    let order_prng = Prng::new(cfg.seed ^ 0x5de4_13cf_9b5c_17a1);
    let micro_per_step = cfg.batch_size * cfg.grad_accum;
    let steps_per_epoch = corpus.len().div_ceil(micro_per_step);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut optimizer = {
        let params: Vec<&Parameter<S>> = base
            .params_mut()
            .into_iter()
            .map(|p| &*p)
            .collect();
        AdamW::new(&params, cfg)?
    };
    let mut trace = Vec::with_capacity(total_steps);
    let mut step_idx = 0usize;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(&order_prng, epoch, corpus.len())?;
        for group in order.chunks(micro_per_step) {
            let lr = lr_schedule(step_idx, total_steps, cfg)?;
            let mut micro_losses = 0.0;
            let mut micro_count = 0usize;
            for micro in group.chunks(cfg.batch_size) {
                let batch: Vec<Vec<usize>> =
                    micro.iter().map(|&i| corpus.entries[i].clone()).collect();
                let mut g = Graph::new();
                let vars = base.stage(&mut g);
                let loss = base.next_token_loss(&mut g, &vars, &batch)?;
                g.backward(loss)?;
                base.absorb_grads(&g, &vars)?;
                micro_losses += g.value(loss).data()[0].to_f64();
                micro_count += 1;
            }
            let inv = S::from_f64(1.0 / micro_count as f64);
            for p in base.params_mut() {
                p.scale_grad(inv);
            }
            {
                let mut params = base.params_mut();
                optimizer.step(&mut params, lr)?;
            }
            for p in base.params_mut() {
                p.zero_grad();
            }
            trace.push(micro_losses / micro_count as f64);
            step_idx += 1;
        }
    }
    Ok((base, trace))
}

/// Builds a distilled corpus: each prompt is extended with the base
/// model's own greedy continuation (up to `max_len` tokens, clipped to
/// the context window).
pub fn self_distill<S: Scalar>(
    base: &BaseLM<S>,
    prompts: &[Vec<usize>],
    max_len: usize,
) -> Result<Corpus> {
    let max_seq = base.config().max_seq;
    let mut entries = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        if prompt.len() >= max_seq {
            return Err(Error::CacheOverflow {
                needed: prompt.len() + 1,
                capacity: max_seq,
            });
        }
        let n = max_len.min(max_seq - prompt.len());
        let completion = base.decode_greedy(prompt, n)?;
        let mut entry = prompt.clone();
        entry.extend(completion);
        entries.push(entry);
    }
    Corpus::new(entries, base.config().vocab, CorpusSource::Distilled)
}

/// Raw tap features `(B, T, 4·d_h)` for a batch, computed with plain
/// (gradient-free) base forwards — the frozen-teacher input of draft
/// training.
pub fn taps_for_batch<S: Scalar>(base: &BaseLM<S>, batch: &[Vec<usize>]) -> Result<Tensor<S>> {
    let mut rows = Vec::with_capacity(batch.len());
    for seq in batch {
        let mut cache = base.new_cache()?;
        let (_, taps) = base.forward(seq, &mut cache, true)?;
        rows.push(taps.expect("taps requested").concat_features()?);
    }
    let refs: Vec<&Tensor<S>> = rows.iter().collect();
    Tensor::concat(&refs, 0)
}

fn check_draft_batch<S: Scalar>(
    base: &BaseLM<S>,
    sf: &SpecFormer<S>,
    batch: &[Vec<usize>],
) -> Result<usize> {
    sf.validate_against(base)?;
    let t_len = batch.first().map(|s| s.len()).unwrap_or(0);
    if t_len < sf.config().l_d + 2 {
        return Err(Error::InvalidParam {
            name: "batch",
            detail: format!(
                "draft training needs sequences of >= l_d + 2 = {} tokens, got {t_len}",
                sf.config().l_d + 2
            ),
        });
    }
    Ok(t_len)
}

/// Monolithic draft loss: cross-entropy of every slot's prediction
/// against its `t + 1 + j` target, averaged over all valid `(t, j)`
/// pairs. The base model is frozen (its tensors enter as constants).
pub fn draft_loss<S: Scalar>(
    base: &BaseLM<S>,
    sf: &SpecFormer<S>,
    batch: &[Vec<usize>],
) -> Result<f64> {
    check_draft_batch(base, sf, batch)?;
    let taps = taps_for_batch(base, batch)?;
    let mut g = Graph::new();
    let vars = sf.stage(&mut g);
    let tv = g.constant(taps);
    let e = sf.encode_graph(&mut g, &vars, tv)?;
    let logits = sf.logits_graph(&mut g, e, base)?;
    let targets = slot_targets(batch, sf.config().l_d)?;
    let loss = g.cross_entropy(logits, &targets, IGNORE)?;
    Ok(g.value(loss).data()[0].to_f64())
}

/// Monolithic draft-loss backward: accumulates gradients into the
/// draft parameters (the oracle `grad_accum_lmhead` is tested against).
pub fn draft_loss_backward<S: Scalar>(
    base: &BaseLM<S>,
    sf: &mut SpecFormer<S>,
    batch: &[Vec<usize>],
) -> Result<f64> {
    check_draft_batch(base, sf, batch)?;
    let taps = taps_for_batch(base, batch)?;
    let mut g = Graph::new();
    let vars = sf.stage(&mut g);
    let tv = g.constant(taps);
    let e = sf.encode_graph(&mut g, &vars, tv)?;
    let logits = sf.logits_graph(&mut g, e, base)?;
    let targets = slot_targets(batch, sf.config().l_d)?;
    let loss = g.cross_entropy(logits, &targets, IGNORE)?;
    g.backward(loss)?;
    sf.absorb_grads(&g, &vars)?;
    Ok(g.value(loss).data()[0].to_f64())
}

/// What [`grad_accum_lmhead`] did, for reporting and accounting tests.
#[derive(Clone, Debug, PartialEq)]
pub struct GradAccumReport {
    /// Total loss (equals the monolithic loss).
    pub loss: f64,
    /// Valid `(t, j)` targets in the batch.
    pub valid_targets: usize,
    /// Largest logits tensor alive at once: `batch·seq·vocab`.
    pub peak_logit_elems: usize,
    /// What the monolithic path would allocate:
    /// `batch·seq·l_d·vocab`.
    pub monolithic_logit_elems: usize,
}

/// Slot-sequential draft-loss backward, equal to the monolithic
/// gradient but with per-slot logits materialized one at a time.
pub fn grad_accum_lmhead<S: Scalar>(
    sf: &mut SpecFormer<S>,
    base: &BaseLM<S>,
    batch: &[Vec<usize>],
) -> Result<GradAccumReport> {
    check_draft_batch(base, sf, batch)?;
    let taps = taps_for_batch(base, batch)?;
    grad_accum_from_taps(sf, base, taps, batch)
}

fn grad_accum_from_taps<S: Scalar>(
    sf: &mut SpecFormer<S>,
    base: &BaseLM<S>,
    taps: Tensor<S>,
    batch: &[Vec<usize>],
) -> Result<GradAccumReport> {
    let l_d = sf.config().l_d;
    let d = sf.config().d_h;
    let vocab = base.config().vocab;
    let (bsz, t_len) = (batch.len(), batch[0].len());

    // trunk forward to the shared slot states E
    let mut trunk = Graph::new();
    let vars = sf.stage(&mut trunk);
    let tv = trunk.constant(taps);
    let e = sf.encode_graph(&mut trunk, &vars, tv)?;
    let e_val = trunk.value(e).clone();

    // per-slot target counts fix the loss weights
    let counts: Vec<usize> = (0..l_d)
        .map(|j| {
            slot_targets_for(batch, j).map(|ts| ts.iter().filter(|&&t| t != IGNORE).count())
        })
        .collect::<Result<Vec<usize>>>()?;
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyLoss("draft loss has no valid targets"));
    }

    let mut d_e = vec![S::zero(); bsz * t_len * l_d * d];
    let mut loss_total = 0.0;
    let mut peak = 0usize;
    for j in 0..l_d {
        if counts[j] == 0 {
            continue;
        }
        let slice = e_val.slice_axis(2, j, 1)?.reshape(vec![bsz, t_len, d])?;
        let mut g = Graph::new();
        let e_j = g.leaf(slice, true);
        let fnorm = g.constant(base.final_norm.value().clone());
        let head = g.constant(base.lm_head.value().clone());
        let f = g.rms_norm(e_j, fnorm, base.config().eps)?;
        let logits = g.matmul(f, head)?;
        peak = peak.max(bsz * t_len * vocab);
        let targets = slot_targets_for(batch, j)?;
        let loss = g.cross_entropy(logits, &targets, IGNORE)?;
        let weight = counts[j] as f64 / total as f64;
        loss_total += weight * g.value(loss).data()[0].to_f64();
        g.backward_seeded(loss, Tensor::new(vec![], vec![S::from_f64(weight)])?)?;
        let grad = g
            .grad(e_j)
            .ok_or(Error::EmptyLoss("slot slice received no gradient"))?;
        for b in 0..bsz {
            for t in 0..t_len {
                let src = (b * t_len + t) * d;
                let dst = ((b * t_len + t) * l_d + j) * d;
                d_e[dst..dst + d].copy_from_slice(&grad.data()[src..src + d]);
            }
        }
    }
    trunk.backward_seeded(e, Tensor::new(vec![bsz, t_len, l_d, d], d_e)?)?;
    sf.absorb_grads(&trunk, &vars)?;
    Ok(GradAccumReport {
        loss: loss_total,
        valid_targets: total,
        peak_logit_elems: peak,
        monolithic_logit_elems: bsz * t_len * l_d * vocab,
    })
}

/// Fraction of valid targets each slot predicts correctly (argmax),
/// one value per slot.
pub fn draft_slot_accuracy<S: Scalar>(
    base: &BaseLM<S>,
    sf: &SpecFormer<S>,
    batch: &[Vec<usize>],
) -> Result<Vec<f64>> {
    check_draft_batch(base, sf, batch)?;
    let taps = taps_for_batch(base, batch)?;
    let mut g = Graph::new();
    let vars = sf.stage(&mut g);
    let tv = g.constant(taps);
    let e = sf.encode_graph(&mut g, &vars, tv)?;
    let logits = sf.logits_graph(&mut g, e, base)?;
    let logits = g.value(logits);
    let l_d = sf.config().l_d;
    let vocab = base.config().vocab;
    let (bsz, t_len) = (batch.len(), batch[0].len());
    let targets = slot_targets(batch, l_d)?;
    let mut hits = vec![0usize; l_d];
    let mut valid = vec![0usize; l_d];
    for b in 0..bsz {
        for t in 0..t_len {
            for j in 0..l_d {
                let flat = (b * t_len + t) * l_d + j;
                let target = targets[flat];
                if target == IGNORE {
                    continue;
                }
                let row = &logits.data()[flat * vocab..(flat + 1) * vocab];
                valid[j] += 1;
                if crate::baselm::greedy_next(row) == target {
                    hits[j] += 1;
                }
            }
        }
    }
    Ok(hits
        .iter()
        .zip(&valid)
        .map(|(&h, &v)| if v == 0 { 0.0 } else { h as f64 / v as f64 })
        .collect())
}

/// Trains the draft model against a frozen base. Tap features are
/// precomputed once per corpus entry. Returns the per-step loss trace;
/// when `ckpt_dir` is given, a checkpoint is written per epoch under
/// `epoch_NNN/`.
pub fn train_draft<S: Scalar>(
    base: &BaseLM<S>,
    sf: &mut SpecFormer<S>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if corpus.vocab != base.config().vocab {
        return Err(Error::VocabMismatch {
            left: corpus.vocab,
            right: base.config().vocab,
        });
    }
    sf.validate_against(base)?;
    let t_len = uniform_len(corpus)?;
    if t_len < sf.config().l_d + 2 {
        return Err(Error::InvalidParam {
            name: "corpus",
            detail: format!(
                "draft training needs entries of >= l_d + 2 = {} tokens, got {t_len}",
                sf.config().l_d + 2
            ),
        });
    }
    if t_len > base.config().max_seq {
        return Err(Error::CacheOverflow {
            needed: t_len,
            capacity: base.config().max_seq,
        });
    }

    // the base is frozen, so tap features are fixed: compute them once
    let mut tap_rows = Vec::with_capacity(corpus.len());
    for entry in &corpus.entries {
        tap_rows.push(taps_for_batch(base, std::slice::from_ref(entry))?);
    }

    let order_prng = Prng::new(cfg.seed ^ 0x9f4a_7c15_85eb_ca6b);
    let micro_per_step = cfg.batch_size * cfg.grad_accum;
    let steps_per_epoch = corpus.len().div_ceil(micro_per_step);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut optimizer = {
        let params: Vec<&Parameter<S>> = sf.params_mut().into_iter().map(|p| &*p).collect();
        AdamW::new(&params, cfg)?
    };
    let mut trace = Vec::with_capacity(total_steps);
    let mut step_idx = 0usize;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(&order_prng, epoch, corpus.len())?;
        for group in order.chunks(micro_per_step) {
            let lr = lr_schedule(step_idx, total_steps, cfg)?;
            let mut micro_losses = 0.0;
            let mut micro_count = 0usize;
            for micro in group.chunks(cfg.batch_size) {
                let batch: Vec<Vec<usize>> =
                    micro.iter().map(|&i| corpus.entries[i].clone()).collect();
                let taps: Vec<&Tensor<S>> = micro.iter().map(|&i| &tap_rows[i]).collect();
                let taps = Tensor::concat(&taps, 0)?;
                let report = grad_accum_from_taps(sf, base, taps, &batch)?;
                micro_losses += report.loss;
                micro_count += 1;
            }
            let inv = S::from_f64(1.0 / micro_count as f64);
            for p in sf.params_mut() {
                p.scale_grad(inv);
            }
            {
                let mut params = sf.params_mut();
                optimizer.step(&mut params, lr)?;
            }
            for p in sf.params_mut() {
                p.zero_grad();
            }
            trace.push(micro_losses / micro_count as f64);
            step_idx += 1;
        }
        if let Some(dir) = ckpt_dir {
            checkpoint::save_specformer(sf, &dir.join(format!("epoch_{epoch:03}")))?;
        }
    }
    Ok(trace)
}
