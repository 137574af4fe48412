//! Small decoder-only base language model.
//!
//! A pre-norm causal transformer: embedding, `L` blocks of
//! `x += Attn(RMS(x)); x += SwiGLU(RMS(x))` with rotary positions, a
//! final RMS norm, and an untied LM head. Besides logits, a forward
//! pass can expose the four hidden-state taps the draft model feeds on:
//! the embedding output, the states after blocks `L/2` and `L-1`, and
//! the last hidden state.
//!
//! Two forward paths share the same kernels. The cached path
//! ([`BaseLM::forward`]) serves decoding: every kernel it touches
//! accumulates in a fixed ascending order and operates row-locally, so
//! forwarding a sequence in any chunking produces bit-identical rows —
//! the property the lossless decoding engine rests on. The recorded
//! path ([`BaseLM::forward_batch_graph`]) builds the same math on a
//! [`Graph`] tape for training.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kvcache::KVCache;
use crate::param::Parameter;
use crate::prng::Prng;
use crate::scalar::Scalar;
use crate::tensor::{attn_single, rope_rows, silu, AttnMask, Tensor};

/// Shape and size knobs of the base model.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BaseLMConfig {
    /// Block count `L`; at least 4 so the four taps are distinct layers.
    pub layers: usize,
    /// Hidden width.
    pub d_h: usize,
    pub n_heads: usize,
    /// SwiGLU inner width.
    pub d_ff: usize,
    /// Vocabulary size.
    pub vocab: usize,
    /// Maximum context length (KV-cache capacity).
    pub max_seq: usize,
    /// Rotary frequency base.
    pub rope_base: f64,
    /// RMS-norm epsilon.
    pub eps: f64,
}

impl Default for BaseLMConfig {
    /// Desk-scale defaults: big enough to learn synthetic languages,
    /// small enough that the full test suite runs on a laptop CPU.
    fn default() -> Self {
        BaseLMConfig {
            layers: 4,
            d_h: 64,
            n_heads: 4,
            d_ff: 256,
            vocab: 64,
            max_seq: 256,
            rope_base: 10000.0,
            eps: 1e-6,
        }
    }
}

impl BaseLMConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |name: &'static str, detail: String| -> Result<()> {
            Err(Error::InvalidParam { name, detail })
        };
        if self.layers < 4 {
            return fail("layers", format!("need >= 4 so the hidden-state taps are distinct, got {}", self.layers));
        }
        if self.d_h == 0 || self.n_heads == 0 || self.d_h % self.n_heads != 0 {
            return fail("d_h", format!("d_h {} must be a positive multiple of n_heads {}", self.d_h, self.n_heads));
        }
        if (self.d_h / self.n_heads) % 2 != 0 {
            return fail("n_heads", format!("head dim {} must be even for rotary pairs", self.d_h / self.n_heads));
        }
        if self.d_ff == 0 {
            return fail("d_ff", "must be positive".into());
        }
        if self.vocab < 2 {
            return fail("vocab", format!("need >= 2, got {}", self.vocab));
        }
        if self.max_seq < 2 {
            return fail("max_seq", format!("need >= 2, got {}", self.max_seq));
        }
        if self.rope_base <= 1.0 {
            return fail("rope_base", format!("need > 1, got {}", self.rope_base));
        }
        if self.eps <= 0.0 {
            return fail("eps", format!("need > 0, got {}", self.eps));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_h / self.n_heads
    }

    /// Tap depths: 0 (embedding output), `L/2`, `L-1`, `L`.
    pub fn tap_depths(&self) -> [usize; 4] {
        [0, self.layers / 2, self.layers - 1, self.layers]
    }
}

/// One transformer block's parameters.
#[derive(Clone, Debug)]
pub struct BlockParams<S: Scalar> {
    pub attn_norm: Parameter<S>,
    pub wq: Parameter<S>,
    pub wk: Parameter<S>,
    pub wv: Parameter<S>,
    pub wo: Parameter<S>,
    pub ffn_norm: Parameter<S>,
    pub w_gate: Parameter<S>,
    pub w_up: Parameter<S>,
    pub w_down: Parameter<S>,
}

/// The four hidden states consumed by the draft model's hook, each of
/// shape `(1, seq, d_h)` for a cached forward (the leading axis is the
/// batch axis; cached decoding always runs one session).
pub struct HiddenStateTaps<S: Scalar> {
    /// Embedding output, `HS[0]`.
    pub hs0: Tensor<S>,
    /// `HS[L/2]`.
    pub hs_mid: Tensor<S>,
    /// `HS[L-1]`.
    pub hs_penult: Tensor<S>,
    /// Last hidden state `HS[L]`, the representation feeding the head.
    pub hs_last: Tensor<S>,
}

impl<S: Scalar> HiddenStateTaps<S> {
    /// Sequence length covered by the taps.
    pub fn seq_len(&self) -> usize {
        self.hs0.shape()[1]
    }

    /// Rows `start..start+len` of all four taps.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<HiddenStateTaps<S>> {
        Ok(HiddenStateTaps {
            hs0: self.hs0.slice_axis(1, start, len)?,
            hs_mid: self.hs_mid.slice_axis(1, start, len)?,
            hs_penult: self.hs_penult.slice_axis(1, start, len)?,
            hs_last: self.hs_last.slice_axis(1, start, len)?,
        })
    }

    /// Raw feature-axis concatenation `(1, seq, 4*d_h)` in tap order —
    /// the un-normalized input of the draft model's hook.
    pub fn concat_features(&self) -> Result<Tensor<S>> {
        Tensor::concat(&[&self.hs0, &self.hs_mid, &self.hs_penult, &self.hs_last], 2)
    }
}

#[derive(Clone, Debug)]
pub struct BaseLM<S: Scalar> {
    config: BaseLMConfig,
    pub embed: Parameter<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub final_norm: Parameter<S>,
    pub lm_head: Parameter<S>,
}

/// Greedy pick over one logits row; ties go to the lowest token id.
pub fn greedy_next<S: Scalar>(logits_row: &[S]) -> usize {
    let mut best = 0usize;
    for (i, &v) in logits_row.iter().enumerate().skip(1) {
        if v > logits_row[best] {
            best = i;
        }
    }
    best
}

impl<S: Scalar> BaseLM<S> {
    /// Fresh model with scaled normal init: every weight matrix is
    /// N(0, 0.02), with the residual-output projections (`wo`,
    /// `w_down`) shrunk by `1/sqrt(2L)`; norm scales start at one.
    pub fn init(config: BaseLMConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut prng = Prng::new(seed);
        let std = 0.02;
        let out_std = std / (2.0 * config.layers as f64).sqrt();
        let (d, ff, v) = (config.d_h, config.d_ff, config.vocab);
        let embed = Parameter::new(prng.normal_tensor(&[v, d], std)?);
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push(BlockParams {
                attn_norm: Parameter::new(Tensor::ones(vec![d])),
                wq: Parameter::new(prng.normal_tensor(&[d, d], std)?),
                wk: Parameter::new(prng.normal_tensor(&[d, d], std)?),
                wv: Parameter::new(prng.normal_tensor(&[d, d], std)?),
                wo: Parameter::new(prng.normal_tensor(&[d, d], out_std)?),
                ffn_norm: Parameter::new(Tensor::ones(vec![d])),
                w_gate: Parameter::new(prng.normal_tensor(&[d, ff], std)?),
                w_up: Parameter::new(prng.normal_tensor(&[d, ff], std)?),
                w_down: Parameter::new(prng.normal_tensor(&[ff, d], out_std)?),
            });
        }
        let final_norm = Parameter::new(Tensor::ones(vec![d]));
        let lm_head = Parameter::new(prng.normal_tensor(&[d, v], std)?);
        Ok(BaseLM {
            config,
            embed,
            blocks,
            final_norm,
            lm_head,
        })
    }

    pub fn config(&self) -> &BaseLMConfig {
        &self.config
    }

    /// Fresh cache sized for this model: one layer per block plus the
    /// draft model's extra context-attention layer.
    pub fn new_cache(&self) -> Result<KVCache<S>> {
        KVCache::new(self.config.layers + 1, self.config.d_h, self.config.max_seq)
    }

    /// Cache layer index reserved for the draft model.
    pub fn draft_layer(&self) -> usize {
        self.config.layers
    }

    /// Total scalar parameter count.
    pub fn count_params(&self) -> usize {
        self.named_tensors()
            .iter()
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Stable `(name, tensor)` listing of every parameter, the basis of
    /// checkpoints and parameter accounting.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![("embed".into(), self.embed.value())];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, p) in Self::block_fields(b) {
                out.push((format!("block{i}.{suffix}"), p.value()));
            }
        }
        out.push(("final_norm".into(), self.final_norm.value()));
        out.push(("lm_head".into(), self.lm_head.value()));
        out
    }

    fn block_fields(b: &BlockParams<S>) -> [(&'static str, &Parameter<S>); 9] {
        [
            ("attn_norm", &b.attn_norm),
            ("wq", &b.wq),
            ("wk", &b.wk),
            ("wv", &b.wv),
            ("wo", &b.wo),
            ("ffn_norm", &b.ffn_norm),
            ("w_gate", &b.w_gate),
            ("w_up", &b.w_up),
            ("w_down", &b.w_down),
        ]
    }

    /// Mutable access to every parameter in the same stable order as
    /// [`BaseLM::named_tensors`]; the optimizer keys its state by index.
    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut out: Vec<&mut Parameter<S>> = vec![&mut self.embed];
        for b in &mut self.blocks {
            out.push(&mut b.attn_norm);
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.wo);
            out.push(&mut b.ffn_norm);
            out.push(&mut b.w_gate);
            out.push(&mut b.w_up);
            out.push(&mut b.w_down);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// Replaces parameter values from a named listing (checkpoint load).
    /// Shapes are validated against the freshly-initialized layout.
    pub fn load_named(&mut self, named: &mut dyn FnMut(&str) -> Result<Tensor<S>>) -> Result<()> {
        let names: Vec<String> = self.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        for (param, name) in self.params_mut().into_iter().zip(names) {
            param.set_value(named(&name)?)?;
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        for &t in tokens {
            if t >= self.config.vocab {
                return Err(Error::TokenRange {
                    id: t,
                    vocab: self.config.vocab,
                });
            }
        }
        Ok(())
    }

    fn check_cache(&self, cache: &KVCache<S>) -> Result<()> {
        if cache.num_layers() != self.config.layers + 1 || cache.width() != self.config.d_h {
            return Err(Error::Cache(format!(
                "cache geometry {}x{} does not fit model ({} layers + draft, width {})",
                cache.num_layers(),
                cache.width(),
                self.config.layers,
                self.config.d_h
            )));
        }
        Ok(())
    }

    /// Incremental forward: runs `tokens` at the positions following
    /// the cache's current length, appending their K/V. Returns logits
    /// of shape `(1, len, V)` and, when requested, the four hidden-state
    /// taps, each `(1, len, d_h)`.
    pub fn forward(
        &self,
        tokens: &[usize],
        cache: &mut KVCache<S>,
        want_taps: bool,
    ) -> Result<(Tensor<S>, Option<HiddenStateTaps<S>>)> {
        self.check_cache(cache)?;
        self.check_tokens(tokens)?;
        let t = tokens.len();
        if t == 0 {
            return Err(Error::Shape {
                op: "forward",
                detail: "need at least one token".into(),
            });
        }
        let needed = cache.len() + t;
        if needed > self.config.max_seq {
            return Err(Error::CacheOverflow {
                needed,
                capacity: self.config.max_seq,
            });
        }
        let cfg = &self.config;
        let (d, heads, hd) = (cfg.d_h, cfg.n_heads, cfg.head_dim());
        let mut x = self.embed_rows(tokens)?;
        let mut taps: Vec<Tensor<S>> = Vec::new();
        let depths = cfg.tap_depths();
        if want_taps {
            taps.push(x.clone()); // depth 0
        }
        for (l, b) in self.blocks.iter().enumerate() {
            let h = x.rms_norm(b.attn_norm.value(), cfg.eps)?;
            let mut q = h.matmul(b.wq.value())?;
            let mut k = h.matmul(b.wk.value())?;
            let v = h.matmul(b.wv.value())?;
            let pos0 = cache.layer_len(l);
            rope_rows(q.data_mut(), t, heads, hd, pos0, cfg.rope_base, false);
            rope_rows(k.data_mut(), t, heads, hd, pos0, cfg.rope_base, false);
            let attn = attend_with_cache(cache, l, q.data(), k.data(), v.data(), t, heads)?;
            let attn = Tensor::new(vec![t, d], attn)?.matmul(b.wo.value())?;
            x = x.add(&attn)?;
            let h2 = x.rms_norm(b.ffn_norm.value(), cfg.eps)?;
            x = x.add(&swiglu_plain(
                &h2,
                b.w_gate.value(),
                b.w_up.value(),
                b.w_down.value(),
            )?)?;
            if want_taps && depths[1..].contains(&(l + 1)) {
                taps.push(x.clone());
            }
        }
        let f = x.rms_norm(self.final_norm.value(), cfg.eps)?;
        let logits = f.matmul(self.lm_head.value())?.reshape(vec![1, t, cfg.vocab])?;
        let taps = if want_taps {
            let mut it = taps.into_iter();
            let lift = |x: Tensor<S>| x.reshape(vec![1, t, d]);
            Some(HiddenStateTaps {
                hs0: lift(it.next().expect("4 taps"))?,
                hs_mid: lift(it.next().expect("4 taps"))?,
                hs_penult: lift(it.next().expect("4 taps"))?,
                hs_last: lift(it.next().expect("4 taps"))?,
            })
        } else {
            None
        };
        Ok((logits, taps))
    }

    fn embed_rows(&self, tokens: &[usize]) -> Result<Tensor<S>> {
        let d = self.config.d_h;
        let table = self.embed.value().data();
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &tok in tokens {
            data.extend_from_slice(&table[tok * d..(tok + 1) * d]);
        }
        Tensor::new(vec![tokens.len(), d], data)
    }

    /// `n` tokens of plain greedy decoding — the reference the lossless
    /// engine must match token for token.
    pub fn decode_greedy(&self, prompt: &[usize], n: usize) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::InvalidParam {
                name: "prompt",
                detail: "greedy decoding needs a nonempty prompt".into(),
            });
        }
        let needed = prompt.len() + n;
        if needed > self.config.max_seq {
            return Err(Error::CacheOverflow {
                needed,
                capacity: self.config.max_seq,
            });
        }
        let mut cache = self.new_cache()?;
        let mut out = Vec::with_capacity(n);
        if n == 0 {
            return Ok(out);
        }
        let v = self.config.vocab;
        let (logits, _) = self.forward(prompt, &mut cache, false)?;
        let rows = logits.numel() / v;
        let mut next = greedy_next(&logits.data()[(rows - 1) * v..]);
        out.push(next);
        while out.len() < n {
            let (logits, _) = self.forward(&[next], &mut cache, false)?;
            next = greedy_next(&logits.data()[..v]);
            out.push(next);
        }
        Ok(out)
    }

    // ---- recorded (training) path -------------------------------------

    /// Registers every parameter as a graph leaf; `requires_grad`
    /// follows each parameter's trainable flag.
    pub fn stage(&self, g: &mut Graph<S>) -> BaseGraphVars {
        let lf = |g: &mut Graph<S>, p: &Parameter<S>| g.leaf(p.value().clone(), p.trainable());
        let embed = lf(g, &self.embed);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                attn_norm: lf(g, &b.attn_norm),
                wq: lf(g, &b.wq),
                wk: lf(g, &b.wk),
                wv: lf(g, &b.wv),
                wo: lf(g, &b.wo),
                ffn_norm: lf(g, &b.ffn_norm),
                w_gate: lf(g, &b.w_gate),
                w_up: lf(g, &b.w_up),
                w_down: lf(g, &b.w_down),
            })
            .collect();
        BaseGraphVars {
            embed,
            blocks,
            final_norm: lf(g, &self.final_norm),
            lm_head: lf(g, &self.lm_head),
        }
    }

    /// Full-sequence batched forward on the tape: `batch` sequences of
    /// one shared length, positions starting at 0, full causal masking.
    /// Returns logits `(B, T, V)`.
    pub fn forward_batch_graph(
        &self,
        g: &mut Graph<S>,
        vars: &BaseGraphVars,
        batch: &[Vec<usize>],
    ) -> Result<Var> {
        let cfg = &self.config;
        let (bsz, t) = batched_dims(batch)?;
        for seq in batch {
            self.check_tokens(seq)?;
        }
        let flat: Vec<usize> = batch.iter().flatten().copied().collect();
        let x = g.gather(vars.embed, &flat)?;
        let mut x = g.reshape(x, vec![bsz, t, cfg.d_h])?;
        for b in &vars.blocks {
            let h = g.rms_norm(x, b.attn_norm, cfg.eps)?;
            let q = g.matmul(h, b.wq)?;
            let k = g.matmul(h, b.wk)?;
            let v = g.matmul(h, b.wv)?;
            let attn = self.graph_attention(g, q, k, v, bsz, t, b.wo)?;
            x = g.add(x, attn)?;
            let h2 = g.rms_norm(x, b.ffn_norm, cfg.eps)?;
            let ffn = g.swiglu(h2, b.w_gate, b.w_up, b.w_down)?;
            x = g.add(x, ffn)?;
        }
        let f = g.rms_norm(x, vars.final_norm, cfg.eps)?;
        g.matmul(f, vars.lm_head)
    }

    fn graph_attention(
        &self,
        g: &mut Graph<S>,
        q: Var,
        k: Var,
        v: Var,
        bsz: usize,
        t: usize,
        wo: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (heads, hd) = (cfg.n_heads, cfg.head_dim());
        let split = |g: &mut Graph<S>, x: Var, rotate: bool| -> Result<Var> {
            let x = g.reshape(x, vec![bsz, t, heads, hd])?;
            let x = if rotate { g.rope(x, 0, cfg.rope_base)? } else { x };
            g.permute(x, &[0, 2, 1, 3])
        };
        let q = split(g, q, true)?;
        let k = split(g, k, true)?;
        let v = split(g, v, false)?;
        let out = g.scaled_dot_attention(q, k, v, Some(AttnMask::causal(t, t, 0)))?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, vec![bsz, t, cfg.d_h])?;
        g.matmul(out, wo)
    }

    /// Mean next-token cross-entropy over a batch: position `t` is
    /// scored against token `t+1`; final positions are ignored.
    pub fn next_token_loss(
        &self,
        g: &mut Graph<S>,
        vars: &BaseGraphVars,
        batch: &[Vec<usize>],
    ) -> Result<Var> {
        let (_bsz, t) = batched_dims(batch)?;
        let logits = self.forward_batch_graph(g, vars, batch)?;
        let mut targets = Vec::with_capacity(batch.len() * t);
        for seq in batch {
            for i in 0..t {
                targets.push(if i + 1 < t { seq[i + 1] } else { IGNORE });
            }
        }
        g.cross_entropy(logits, &targets, IGNORE)
    }

    /// Adds each staged leaf's gradient into the matching parameter.
    pub fn absorb_grads(&mut self, g: &Graph<S>, vars: &BaseGraphVars) -> Result<()> {
        let order = vars.ordered();
        for (param, var) in self.params_mut().into_iter().zip(order) {
            if let Some(grad) = g.grad(var) {
                param.accumulate_grad(&grad.clone())?;
            }
        }
        Ok(())
    }
}

/// Target sentinel meaning "no loss at this position".
pub const IGNORE: usize = usize::MAX;

/// Staged graph handles for every base parameter.
pub struct BaseGraphVars {
    pub embed: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub lm_head: Var,
}

pub struct BlockVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl BaseGraphVars {
    /// Vars in [`BaseLM::params_mut`] order.
    fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for b in &self.blocks {
            out.extend([
                b.attn_norm,
                b.wq,
                b.wk,
                b.wv,
                b.wo,
                b.ffn_norm,
                b.w_gate,
                b.w_up,
                b.w_down,
            ]);
        }
        out.push(self.final_norm);
        out.push(self.lm_head);
        out
    }
}

pub(crate) fn batched_dims(batch: &[Vec<usize>]) -> Result<(usize, usize)> {
    let bsz = batch.len();
    if bsz == 0 {
        return Err(Error::Shape {
            op: "batch",
            detail: "empty batch".into(),
        });
    }
    let t = batch[0].len();
    if t == 0 || batch.iter().any(|s| s.len() != t) {
        return Err(Error::Shape {
            op: "batch",
            detail: "all sequences in a batch must share one nonzero length".into(),
        });
    }
    Ok((bsz, t))
}

/// Plain-tensor SwiGLU: `(silu(x Wg) * (x Wu)) Wd`.
pub(crate) fn swiglu_plain<S: Scalar>(
    x: &Tensor<S>,
    w_gate: &Tensor<S>,
    w_up: &Tensor<S>,
    w_down: &Tensor<S>,
) -> Result<Tensor<S>> {
    let gate = x.matmul(w_gate)?;
    let gate = Tensor::new(
        gate.shape().to_vec(),
        gate.data().iter().map(|&v| silu(v)).collect(),
    )?;
    let up = x.matmul(w_up)?;
    gate.mul(&up)?.matmul(w_down)
}

/// Multi-head causal attention of `t` new rows against a cache layer.
///
/// `q`/`k`/`v` are `(t, heads*head_dim)` rows with rotation already
/// applied to `q` and `k`; the new K/V rows are appended to the layer,
/// then every head attends over the full cached prefix plus the new
/// rows with a causal mask offset by the old length. Returns `(t, d)`
/// output rows (pre output-projection).
pub(crate) fn attend_with_cache<S: Scalar>(
    cache: &mut KVCache<S>,
    layer: usize,
    q: &[S],
    k_new: &[S],
    v_new: &[S],
    t: usize,
    heads: usize,
) -> Result<Vec<S>> {
    let d = cache.width();
    let hd = d / heads;
    let pos0 = cache.layer_len(layer);
    cache.append(layer, k_new, v_new, t)?;
    let total = pos0 + t;
    let keys = cache.keys(layer);
    let vals = cache.values(layer);
    let mask = AttnMask::causal(t, total, pos0);
    let scale = S::from_f64(1.0 / (hd as f64).sqrt());
    let mut out = vec![S::zero(); t * d];
    let mut qh = vec![S::zero(); t * hd];
    let mut kh = vec![S::zero(); total * hd];
    let mut vh = vec![S::zero(); total * hd];
    for h in 0..heads {
        for i in 0..t {
            qh[i * hd..(i + 1) * hd].copy_from_slice(&q[i * d + h * hd..i * d + (h + 1) * hd]);
        }
        for j in 0..total {
            kh[j * hd..(j + 1) * hd].copy_from_slice(&keys[j * d + h * hd..j * d + (h + 1) * hd]);
            vh[j * hd..(j + 1) * hd].copy_from_slice(&vals[j * d + h * hd..j * d + (h + 1) * hd]);
        }
        let (o, _) = attn_single(&qh, t, &kh, total, &vh, hd, scale, Some(&mask))?;
        for i in 0..t {
            out[i * d + h * hd..i * d + (h + 1) * hd].copy_from_slice(&o[i * hd..(i + 1) * hd]);
        }
    }
    Ok(out)
}
