//! SpecFormer draft model.
//!
//! Turns the base model's hidden-state taps into `l_d` draft tokens per
//! context position in one parallel pass:
//!
//! 1. **Hook**: the four taps are concatenated featurewise and each
//!    slice gets its own RMS norm (grouped norm) — `I_Cat`.
//! 2. **Downsampler + context causal attention**: `X = W_D * I_Cat`,
//!    then `I_D = MSA(RMS(X)) + X`, causal over context positions with
//!    rotary positions, its K/V living in the cache's extra layer.
//! 3. **Positional FFN**: `D = reshape(W_P * RMS(I_D) + b_P)` to
//!    `(batch, seq, l_d, d_h)` — each draft slot gets its own weight
//!    slice; this is the only place slot identity enters.
//! 4. **Draft bidirectional block**: unmasked self-attention along the
//!    slot axis (no positional encoding there) plus a SwiGLU, both as
//!    pre-norm residual units — `E`.
//! 5. **Frozen head**: the base model's final norm and LM head score
//!    each slot; the base receives no gradient.
//!
//! The plain-tensor methods serve decoding; `encode_graph` builds the
//! identical math on a tape for training.

use crate::baselm::{
    attend_with_cache, batched_dims, greedy_next, swiglu_plain, BaseLM, HiddenStateTaps, IGNORE,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kvcache::KVCache;
use crate::param::Parameter;
use crate::prng::Prng;
use crate::scalar::Scalar;
use crate::tensor::{attn_single, rope_rows, AttnMask, Tensor};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpecFormerConfig {
    /// Hidden width; must match the base model.
    pub d_h: usize,
    /// Draft length: tokens proposed per step.
    pub l_d: usize,
    pub n_heads: usize,
    /// SwiGLU inner width of the draft block.
    pub d_ff: usize,
    /// RMS-norm epsilon.
    pub eps: f64,
    /// Rotary base for the context attention; matches the base model.
    pub rope_base: f64,
}

impl Default for SpecFormerConfig {
    fn default() -> Self {
        SpecFormerConfig {
            d_h: 64,
            l_d: 4,
            n_heads: 4,
            d_ff: 256,
            eps: 1e-6,
            rope_base: 10000.0,
        }
    }
}

impl SpecFormerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |name: &'static str, detail: String| -> Result<()> {
            Err(Error::InvalidParam { name, detail })
        };
        if self.l_d == 0 {
            return fail("l_d", "draft length must be >= 1".into());
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
        if self.eps <= 0.0 {
            return fail("eps", format!("need > 0, got {}", self.eps));
        }
        if self.rope_base <= 1.0 {
            return fail("rope_base", format!("need > 1, got {}", self.rope_base));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_h / self.n_heads
    }
}

#[derive(Clone, Debug)]
pub struct SpecFormer<S: Scalar> {
    config: SpecFormerConfig,
    /// One scale vector per tap slice, `(4, d_h)`.
    pub cat_scales: Parameter<S>,
    /// Downsampler `(4*d_h, d_h)`, no bias.
    pub w_d: Parameter<S>,
    pub msa_norm: Parameter<S>,
    pub msa_wq: Parameter<S>,
    pub msa_wk: Parameter<S>,
    pub msa_wv: Parameter<S>,
    pub msa_wo: Parameter<S>,
    pub head_norm: Parameter<S>,
    /// Positional projection `(d_h, l_d*d_h)`.
    pub w_p: Parameter<S>,
    /// Positional bias `(l_d*d_h)`.
    pub b_p: Parameter<S>,
    pub enc_sa_norm: Parameter<S>,
    pub enc_wq: Parameter<S>,
    pub enc_wk: Parameter<S>,
    pub enc_wv: Parameter<S>,
    pub enc_wo: Parameter<S>,
    pub enc_ffn_norm: Parameter<S>,
    pub enc_w_gate: Parameter<S>,
    pub enc_w_up: Parameter<S>,
    pub enc_w_down: Parameter<S>,
}

/// Draft-slot intermediate states `D` and `E`, both
/// `(batch, seq, l_d, d_h)`.
pub struct DraftStates<S: Scalar> {
    pub d: Tensor<S>,
    pub e: Tensor<S>,
}

/// Hook of the draft model: concatenate the four taps featurewise and
/// RMS-normalize each slice with its own scale vector. `group_scales`
/// is `(4, d_h)`; the result is `(batch, seq, 4*d_h)`.
pub fn hook_concat<S: Scalar>(
    taps: &HiddenStateTaps<S>,
    group_scales: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    let d = taps.hs0.shape()[taps.hs0.rank() - 1];
    if group_scales.shape() != [4, d] {
        return Err(Error::Shape {
            op: "hook_concat",
            detail: format!("group scales {:?} vs taps of width {d}", group_scales.shape()),
        });
    }
    let cat = taps.concat_features()?;
    cat.grouped_rms_norm(group_scales, 4, eps)
}

impl<S: Scalar> SpecFormer<S> {
    /// Fresh draft model: weights N(0, 0.02) with residual-output
    /// projections shrunk by `1/sqrt(4)` (two residual units), zero
    /// positional bias, unit norm scales.
    pub fn init(config: SpecFormerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut prng = Prng::new(seed);
        let std = 0.02;
        let out_std = std / 2.0;
        let (d, ff, l) = (config.d_h, config.d_ff, config.l_d);
        Ok(SpecFormer {
            cat_scales: Parameter::new(Tensor::ones(vec![4, d])),
            w_d: Parameter::new(prng.normal_tensor(&[4 * d, d], std)?),
            msa_norm: Parameter::new(Tensor::ones(vec![d])),
            msa_wq: Parameter::new(prng.normal_tensor(&[d, d], std)?),
            msa_wk: Parameter::new(prng.normal_tensor(&[d, d], std)?),
            msa_wv: Parameter::new(prng.normal_tensor(&[d, d], std)?),
            msa_wo: Parameter::new(prng.normal_tensor(&[d, d], out_std)?),
            head_norm: Parameter::new(Tensor::ones(vec![d])),
            w_p: Parameter::new(prng.normal_tensor(&[d, l * d], std)?),
            b_p: Parameter::new(Tensor::zeros(vec![l * d])),
            enc_sa_norm: Parameter::new(Tensor::ones(vec![d])),
            enc_wq: Parameter::new(prng.normal_tensor(&[d, d], std)?),
            enc_wk: Parameter::new(prng.normal_tensor(&[d, d], std)?),
            enc_wv: Parameter::new(prng.normal_tensor(&[d, d], std)?),
            enc_wo: Parameter::new(prng.normal_tensor(&[d, d], out_std)?),
            enc_ffn_norm: Parameter::new(Tensor::ones(vec![d])),
            enc_w_gate: Parameter::new(prng.normal_tensor(&[d, ff], std)?),
            enc_w_up: Parameter::new(prng.normal_tensor(&[d, ff], std)?),
            enc_w_down: Parameter::new(prng.normal_tensor(&[ff, d], out_std)?),
            config,
        })
    }

    pub fn config(&self) -> &SpecFormerConfig {
        &self.config
    }

    /// Checks dimensional compatibility with a base model.
    pub fn validate_against(&self, base: &BaseLM<S>) -> Result<()> {
        if base.config().d_h != self.config.d_h {
            return Err(Error::Shape {
                op: "specformer",
                detail: format!(
                    "draft width {} vs base width {}",
                    self.config.d_h,
                    base.config().d_h
                ),
            });
        }
        Ok(())
    }

    /// `(m_s, m_p)`: parameters shared across slots, and per-slot
    /// positional parameters (`m_p = d_h^2 + d_h`; the positional total
    /// is `l_d * m_p`).
    pub fn count_draft_params(&self) -> (usize, usize) {
        let d = self.config.d_h;
        let m_p = d * d + d;
        let total: usize = self.named_tensors().iter().map(|(_, t)| t.numel()).sum();
        (total - self.config.l_d * m_p, m_p)
    }

    /// Closed-form [`Self::count_draft_params`] for a hypothetical
    /// draft model of width `d_h` and FFN size `d_ff`, usable without
    /// instantiating the tensors (e.g. for production-scale what-ifs).
    pub fn param_formula(d_h: usize, d_ff: usize) -> (usize, usize) {
        (12 * d_h * d_h + 3 * d_h * d_ff + 8 * d_h, d_h * d_h + d_h)
    }

    pub fn count_params(&self) -> usize {
        let (m_s, m_p) = self.count_draft_params();
        m_s + self.config.l_d * m_p
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        self.fields()
            .into_iter()
            .map(|(n, p)| (n.to_string(), p.value()))
            .collect()
    }

    fn fields(&self) -> [(&'static str, &Parameter<S>); 19] {
        [
            ("cat_scales", &self.cat_scales),
            ("w_d", &self.w_d),
            ("msa_norm", &self.msa_norm),
            ("msa_wq", &self.msa_wq),
            ("msa_wk", &self.msa_wk),
            ("msa_wv", &self.msa_wv),
            ("msa_wo", &self.msa_wo),
            ("head_norm", &self.head_norm),
            ("w_p", &self.w_p),
            ("b_p", &self.b_p),
            ("enc_sa_norm", &self.enc_sa_norm),
            ("enc_wq", &self.enc_wq),
            ("enc_wk", &self.enc_wk),
            ("enc_wv", &self.enc_wv),
            ("enc_wo", &self.enc_wo),
            ("enc_ffn_norm", &self.enc_ffn_norm),
            ("enc_w_gate", &self.enc_w_gate),
            ("enc_w_up", &self.enc_w_up),
            ("enc_w_down", &self.enc_w_down),
        ]
    }

    /// Mutable parameters in [`SpecFormer::named_tensors`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![
            &mut self.cat_scales,
            &mut self.w_d,
            &mut self.msa_norm,
            &mut self.msa_wq,
            &mut self.msa_wk,
            &mut self.msa_wv,
            &mut self.msa_wo,
            &mut self.head_norm,
            &mut self.w_p,
            &mut self.b_p,
            &mut self.enc_sa_norm,
            &mut self.enc_wq,
            &mut self.enc_wk,
            &mut self.enc_wv,
            &mut self.enc_wo,
            &mut self.enc_ffn_norm,
            &mut self.enc_w_gate,
            &mut self.enc_w_up,
            &mut self.enc_w_down,
        ]
    }

    pub fn load_named(&mut self, named: &mut dyn FnMut(&str) -> Result<Tensor<S>>) -> Result<()> {
        let names: Vec<String> = self.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        for (param, name) in self.params_mut().into_iter().zip(names) {
            param.set_value(named(&name)?)?;
        }
        Ok(())
    }

    // ---- plain-tensor pipeline (decoding) ------------------------------

    /// Downsample `I_Cat` and run causal context attention against the
    /// cache's draft layer: `I_D = MSA(RMS(W_D I_Cat)) + W_D I_Cat`.
    /// `i_cat` is `(1, seq, 4*d_h)` — cached attention serves a single
    /// decoding session. New K/V rows are appended to the draft layer.
    pub fn context_causal_attention(
        &self,
        i_cat: &Tensor<S>,
        cache: &mut KVCache<S>,
    ) -> Result<Tensor<S>> {
        let cfg = &self.config;
        let d = cfg.d_h;
        if i_cat.rank() != 3 || i_cat.shape()[0] != 1 || i_cat.shape()[2] != 4 * d {
            return Err(Error::Shape {
                op: "context_causal_attention",
                detail: format!("expected (1, seq, {}), got {:?}", 4 * d, i_cat.shape()),
            });
        }
        if cache.width() != d {
            return Err(Error::Cache(format!(
                "cache width {} vs draft width {d}",
                cache.width()
            )));
        }
        let t = i_cat.shape()[1];
        let layer = cache.num_layers() - 1;
        let x = i_cat.reshape(vec![t, 4 * d])?.matmul(self.w_d.value())?;
        let h = x.rms_norm(self.msa_norm.value(), cfg.eps)?;
        let mut q = h.matmul(self.msa_wq.value())?;
        let mut k = h.matmul(self.msa_wk.value())?;
        let v = h.matmul(self.msa_wv.value())?;
        let pos0 = cache.layer_len(layer);
        let (heads, hd) = (cfg.n_heads, cfg.head_dim());
        rope_rows(q.data_mut(), t, heads, hd, pos0, cfg.rope_base, false);
        rope_rows(k.data_mut(), t, heads, hd, pos0, cfg.rope_base, false);
        let attn = attend_with_cache(cache, layer, q.data(), k.data(), v.data(), t, heads)?;
        let attn = Tensor::new(vec![t, d], attn)?.matmul(self.msa_wo.value())?;
        x.add(&attn)?.reshape(vec![1, t, d])
    }

    /// `D = reshape(W_P RMS(I_D) + b_P)`: expands each context position
    /// into `l_d` slot states. `(b, seq, d_h)` -> `(b, seq, l_d, d_h)`.
    pub fn positional_ffn(&self, i_d: &Tensor<S>) -> Result<Tensor<S>> {
        let cfg = &self.config;
        let d = cfg.d_h;
        if i_d.rank() != 3 || i_d.shape()[2] != d {
            return Err(Error::Shape {
                op: "positional_ffn",
                detail: format!("expected (b, seq, {d}), got {:?}", i_d.shape()),
            });
        }
        let (b, t) = (i_d.shape()[0], i_d.shape()[1]);
        let h = i_d.rms_norm(self.head_norm.value(), cfg.eps)?;
        let p = h
            .reshape(vec![b * t, d])?
            .matmul(self.w_p.value())?
            .add(self.b_p.value())?;
        p.reshape(vec![b, t, cfg.l_d, d])
    }

    /// `E = (SwiGLU·RMS + I)((SA·RMS + I)(D))`: unmasked attention along
    /// the slot axis only, with no positional encoding, then a SwiGLU —
    /// both pre-norm residual units. Context positions never mix; the
    /// effective batch is `b * seq`.
    pub fn draft_bidirectional_block(&self, d_states: &Tensor<S>) -> Result<Tensor<S>> {
        let cfg = &self.config;
        let (d, l) = (cfg.d_h, cfg.l_d);
        if d_states.rank() != 4 || d_states.shape()[2] != l || d_states.shape()[3] != d {
            return Err(Error::Shape {
                op: "draft_bidirectional_block",
                detail: format!("expected (b, seq, {l}, {d}), got {:?}", d_states.shape()),
            });
        }
        let (b, t) = (d_states.shape()[0], d_states.shape()[1]);
        let rows = b * t;
        let flat = d_states.reshape(vec![rows, l, d])?;
        let h = flat.rms_norm(self.enc_sa_norm.value(), cfg.eps)?;
        let q = h.matmul(self.enc_wq.value())?;
        let k = h.matmul(self.enc_wk.value())?;
        let v = h.matmul(self.enc_wv.value())?;
        let (heads, hd) = (cfg.n_heads, cfg.head_dim());
        let scale = S::from_f64(1.0 / (hd as f64).sqrt());
        let mut out = vec![S::zero(); rows * l * d];
        let mut qh = vec![S::zero(); l * hd];
        let mut kh = vec![S::zero(); l * hd];
        let mut vh = vec![S::zero(); l * hd];
        for r in 0..rows {
            for hidx in 0..heads {
                for j in 0..l {
                    let src = r * l * d + j * d + hidx * hd;
                    qh[j * hd..(j + 1) * hd].copy_from_slice(&q.data()[src..src + hd]);
                    kh[j * hd..(j + 1) * hd].copy_from_slice(&k.data()[src..src + hd]);
                    vh[j * hd..(j + 1) * hd].copy_from_slice(&v.data()[src..src + hd]);
                }
                let (o, _) = attn_single(&qh, l, &kh, l, &vh, hd, scale, None)?;
                for j in 0..l {
                    let dst = r * l * d + j * d + hidx * hd;
                    out[dst..dst + hd].copy_from_slice(&o[j * hd..(j + 1) * hd]);
                }
            }
        }
        let sa = Tensor::new(vec![rows, l, d], out)?.matmul(self.enc_wo.value())?;
        let d1 = flat.add(&sa)?;
        let h2 = d1.rms_norm(self.enc_ffn_norm.value(), cfg.eps)?;
        let ffn = swiglu_plain(
            &h2,
            self.enc_w_gate.value(),
            self.enc_w_up.value(),
            self.enc_w_down.value(),
        )?;
        d1.add(&ffn)?.reshape(vec![b, t, l, d])
    }

    /// Scores slot states with the base model's FROZEN final norm and
    /// LM head: `(b, seq, l_d, d_h)` -> `(b, seq, l_d, V)`.
    pub fn draft_logits(&self, e: &Tensor<S>, base: &BaseLM<S>) -> Result<Tensor<S>> {
        self.validate_against(base)?;
        let f = e.rms_norm(base.final_norm.value(), base.config().eps)?;
        f.matmul(base.lm_head.value())
    }

    /// One decoding-time draft: ingests the tap rows of the newly
    /// accepted positions (appending context-attention K/V to the draft
    /// layer), then proposes `l_d` tokens from the newest position.
    pub fn generate_draft(
        &self,
        base: &BaseLM<S>,
        taps: &HiddenStateTaps<S>,
        cache: &mut KVCache<S>,
    ) -> Result<Vec<usize>> {
        self.validate_against(base)?;
        let i_cat = hook_concat(taps, self.cat_scales.value(), self.config.eps)?;
        let i_d = self.context_causal_attention(&i_cat, cache)?;
        let t = i_d.shape()[1];
        let last = i_d.slice_axis(1, t - 1, 1)?;
        let d_states = self.positional_ffn(&last)?;
        let e = self.draft_bidirectional_block(&d_states)?;
        let logits = self.draft_logits(&e, base)?;
        let v = base.config().vocab;
        let mut out = Vec::with_capacity(self.config.l_d);
        for j in 0..self.config.l_d {
            out.push(greedy_next(&logits.data()[j * v..(j + 1) * v]));
        }
        Ok(out)
    }

    // ---- recorded (training) path --------------------------------------

    pub fn stage(&self, g: &mut Graph<S>) -> SpecVars {
        let lf = |g: &mut Graph<S>, p: &Parameter<S>| g.leaf(p.value().clone(), p.trainable());
        SpecVars {
            cat_scales: lf(g, &self.cat_scales),
            w_d: lf(g, &self.w_d),
            msa_norm: lf(g, &self.msa_norm),
            msa_wq: lf(g, &self.msa_wq),
            msa_wk: lf(g, &self.msa_wk),
            msa_wv: lf(g, &self.msa_wv),
            msa_wo: lf(g, &self.msa_wo),
            head_norm: lf(g, &self.head_norm),
            w_p: lf(g, &self.w_p),
            b_p: lf(g, &self.b_p),
            enc_sa_norm: lf(g, &self.enc_sa_norm),
            enc_wq: lf(g, &self.enc_wq),
            enc_wk: lf(g, &self.enc_wk),
            enc_wv: lf(g, &self.enc_wv),
            enc_wo: lf(g, &self.enc_wo),
            enc_ffn_norm: lf(g, &self.enc_ffn_norm),
            enc_w_gate: lf(g, &self.enc_w_gate),
            enc_w_up: lf(g, &self.enc_w_up),
            enc_w_down: lf(g, &self.enc_w_down),
        }
    }

    /// Training forward from raw tap features to slot states `E`.
    /// `taps_raw` is a `(B, T, 4*d_h)` node (a constant when the base
    /// is frozen); positions run 0..T with full causal masking.
    pub fn encode_graph(&self, g: &mut Graph<S>, vars: &SpecVars, taps_raw: Var) -> Result<Var> {
        let cfg = &self.config;
        let (d, l) = (cfg.d_h, cfg.l_d);
        let shape = g.value(taps_raw).shape().to_vec();
        if shape.len() != 3 || shape[2] != 4 * d {
            return Err(Error::Shape {
                op: "encode_graph",
                detail: format!("expected (B, T, {}), got {shape:?}", 4 * d),
            });
        }
        let (bsz, t) = (shape[0], shape[1]);
        let icat = g.grouped_rms_norm(taps_raw, vars.cat_scales, 4, cfg.eps)?;
        let x = g.matmul(icat, vars.w_d)?;
        // context causal attention
        let h = g.rms_norm(x, vars.msa_norm, cfg.eps)?;
        let q = g.matmul(h, vars.msa_wq)?;
        let k = g.matmul(h, vars.msa_wk)?;
        let v = g.matmul(h, vars.msa_wv)?;
        let (heads, hd) = (cfg.n_heads, cfg.head_dim());
        let split = |g: &mut Graph<S>, x: Var, rotate: bool| -> Result<Var> {
            let x = g.reshape(x, vec![bsz, t, heads, hd])?;
            let x = if rotate { g.rope(x, 0, cfg.rope_base)? } else { x };
            g.permute(x, &[0, 2, 1, 3])
        };
        let qs = split(g, q, true)?;
        let ks = split(g, k, true)?;
        let vs = split(g, v, false)?;
        let attn = g.scaled_dot_attention(qs, ks, vs, Some(AttnMask::causal(t, t, 0)))?;
        let attn = g.permute(attn, &[0, 2, 1, 3])?;
        let attn = g.reshape(attn, vec![bsz, t, d])?;
        let attn = g.matmul(attn, vars.msa_wo)?;
        let i_d = g.add(x, attn)?;
        // positional FFN
        let hh = g.rms_norm(i_d, vars.head_norm, cfg.eps)?;
        let p = g.matmul(hh, vars.w_p)?;
        let p = g.add(p, vars.b_p)?;
        let d_states = g.reshape(p, vec![bsz * t, l, d])?;
        // draft bidirectional block (slot axis, unmasked, no positions)
        let h = g.rms_norm(d_states, vars.enc_sa_norm, cfg.eps)?;
        let q = g.matmul(h, vars.enc_wq)?;
        let k = g.matmul(h, vars.enc_wk)?;
        let v = g.matmul(h, vars.enc_wv)?;
        let split_slots = |g: &mut Graph<S>, x: Var| -> Result<Var> {
            let x = g.reshape(x, vec![bsz * t, l, heads, hd])?;
            g.permute(x, &[0, 2, 1, 3])
        };
        let qs = split_slots(g, q)?;
        let ks = split_slots(g, k)?;
        let vs = split_slots(g, v)?;
        let sa = g.scaled_dot_attention(qs, ks, vs, None)?;
        let sa = g.permute(sa, &[0, 2, 1, 3])?;
        let sa = g.reshape(sa, vec![bsz * t, l, d])?;
        let sa = g.matmul(sa, vars.enc_wo)?;
        let d1 = g.add(d_states, sa)?;
        let h2 = g.rms_norm(d1, vars.enc_ffn_norm, cfg.eps)?;
        let ffn = g.swiglu(h2, vars.enc_w_gate, vars.enc_w_up, vars.enc_w_down)?;
        let e = g.add(d1, ffn)?;
        g.reshape(e, vec![bsz, t, l, d])
    }

    /// Slot logits on the tape through the frozen base head; the norm
    /// scale and head enter as constants so no gradient reaches them.
    pub fn logits_graph(&self, g: &mut Graph<S>, e: Var, base: &BaseLM<S>) -> Result<Var> {
        self.validate_against(base)?;
        let fnorm = g.constant(base.final_norm.value().clone());
        let head = g.constant(base.lm_head.value().clone());
        let f = g.rms_norm(e, fnorm, base.config().eps)?;
        g.matmul(f, head)
    }

    /// Adds each staged leaf's gradient into the matching parameter.
    pub fn absorb_grads(&mut self, g: &Graph<S>, vars: &SpecVars) -> Result<()> {
        let order = vars.ordered();
        for (param, var) in self.params_mut().into_iter().zip(order) {
            if let Some(grad) = g.grad(var) {
                param.accumulate_grad(&grad.clone())?;
            }
        }
        Ok(())
    }
}

/// Staged graph handles for every draft parameter.
pub struct SpecVars {
    pub cat_scales: Var,
    pub w_d: Var,
    pub msa_norm: Var,
    pub msa_wq: Var,
    pub msa_wk: Var,
    pub msa_wv: Var,
    pub msa_wo: Var,
    pub head_norm: Var,
    pub w_p: Var,
    pub b_p: Var,
    pub enc_sa_norm: Var,
    pub enc_wq: Var,
    pub enc_wk: Var,
    pub enc_wv: Var,
    pub enc_wo: Var,
    pub enc_ffn_norm: Var,
    pub enc_w_gate: Var,
    pub enc_w_up: Var,
    pub enc_w_down: Var,
}

impl SpecVars {
    fn ordered(&self) -> Vec<Var> {
        vec![
            self.cat_scales,
            self.w_d,
            self.msa_norm,
            self.msa_wq,
            self.msa_wk,
            self.msa_wv,
            self.msa_wo,
            self.head_norm,
            self.w_p,
            self.b_p,
            self.enc_sa_norm,
            self.enc_wq,
            self.enc_wk,
            self.enc_wv,
            self.enc_wo,
            self.enc_ffn_norm,
            self.enc_w_gate,
            self.enc_w_up,
            self.enc_w_down,
        ]
    }
}

/// Flattened `(B, T, l_d)` training targets: at context position `t`,
/// slot `j` (1-based `j = j0+1`) predicts token `t + 1 + j`; positions
/// whose target falls past the sequence end are ignored.
pub fn slot_targets(batch: &[Vec<usize>], l_d: usize) -> Result<Vec<usize>> {
    let (_b, t_len) = batched_dims(batch)?;
    let mut out = Vec::with_capacity(batch.len() * t_len * l_d);
    for seq in batch {
        for t in 0..t_len {
            for j0 in 0..l_d {
                let idx = t + 2 + j0;
                out.push(if idx < t_len { seq[idx] } else { IGNORE });
            }
        }
    }
    Ok(out)
}

/// `(B, T)` targets of a single slot `j0` (0-based).
pub fn slot_targets_for(batch: &[Vec<usize>], j0: usize) -> Result<Vec<usize>> {
    let (_b, t_len) = batched_dims(batch)?;
    let mut out = Vec::with_capacity(batch.len() * t_len);
    for seq in batch {
        for t in 0..t_len {
            let idx = t + 2 + j0;
            out.push(if idx < t_len { seq[idx] } else { IGNORE });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselm::BaseLMConfig;

    fn tiny_base() -> BaseLM<f64> {
        BaseLM::init(
            BaseLMConfig {
                layers: 4,
                d_h: 8,
                n_heads: 2,
                d_ff: 16,
                vocab: 13,
                max_seq: 32,
                rope_base: 10000.0,
                eps: 1e-6,
            },
            41,
        )
        .unwrap()
    }

    fn tiny_draft(l_d: usize) -> SpecFormer<f64> {
        SpecFormer::init(
            SpecFormerConfig {
                d_h: 8,
                l_d,
                n_heads: 2,
                d_ff: 16,
                eps: 1e-6,
                rope_base: 10000.0,
            },
            43,
        )
        .unwrap()
    }

    fn taps_of(base: &BaseLM<f64>, tokens: &[usize]) -> HiddenStateTaps<f64> {
        let mut cache = base.new_cache().unwrap();
        base.forward(tokens, &mut cache, true).unwrap().1.unwrap()
    }

    #[test]
    fn hook_concat_shape_and_composition() {
        let base = tiny_base();
        let sf = tiny_draft(3);
        let taps = taps_of(&base, &[1, 2, 3, 4, 5]);
        let i_cat = hook_concat(&taps, sf.cat_scales.value(), 1e-6).unwrap();
        assert_eq!(i_cat.shape(), &[1, 5, 32]);
        // Per-slice composition: each d-wide slice equals an independent
        // rms_norm of the corresponding tap.
        let ones = Tensor::<f64>::ones(vec![8]);
        for (slice, tap) in [&taps.hs0, &taps.hs_mid, &taps.hs_penult, &taps.hs_last]
            .iter()
            .enumerate()
        {
            let solo = tap.rms_norm(&ones, 1e-6).unwrap();
            for t in 0..5 {
                for c in 0..8 {
                    let got = i_cat.get(&[0, t, slice * 8 + c]);
                    let want = solo.get(&[0, t, c]);
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_taps_produce_zero_hook_output() {
        let z = || Tensor::<f64>::zeros(vec![1, 3, 8]);
        let taps = HiddenStateTaps {
            hs0: z(),
            hs_mid: z(),
            hs_penult: z(),
            hs_last: z(),
        };
        let scales = Tensor::ones(vec![4, 8]);
        let i_cat = hook_concat(&taps, &scales, 1e-6).unwrap();
        assert!(i_cat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn context_attention_residual_identity_when_output_projection_zeroed() {
        let base = tiny_base();
        let mut sf = tiny_draft(2);
        sf.msa_wo.set_value(Tensor::zeros(vec![8, 8])).unwrap();
        let taps = taps_of(&base, &[1, 2, 3]);
        let i_cat = hook_concat(&taps, sf.cat_scales.value(), 1e-6).unwrap();
        let mut cache = base.new_cache().unwrap();
        let i_d = sf.context_causal_attention(&i_cat, &mut cache).unwrap();
        let x = i_cat
            .reshape(vec![3, 32])
            .unwrap()
            .matmul(sf.w_d.value())
            .unwrap();
        for (a, b) in i_d.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(cache.layer_len(cache.num_layers() - 1), 3);
        assert_eq!(cache.layer_len(0), 0, "base layers untouched");
    }

    #[test]
    fn context_attention_is_causal_over_context_positions() {
        let base = tiny_base();
        let sf = tiny_draft(2);
        let t1 = taps_of(&base, &[1, 2, 3, 4, 5]);
        let t2 = taps_of(&base, &[1, 2, 3, 9, 5]);
        let run = |taps: &HiddenStateTaps<f64>| {
            let i_cat = hook_concat(taps, sf.cat_scales.value(), 1e-6).unwrap();
            let mut cache = base.new_cache().unwrap();
            sf.context_causal_attention(&i_cat, &mut cache).unwrap()
        };
        let (a, b) = (run(&t1), run(&t2));
        // positions before the perturbed token match exactly
        for t in 0..3 {
            for c in 0..8 {
                assert_eq!(a.get(&[0, t, c]), b.get(&[0, t, c]));
            }
        }
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn positional_ffn_zero_weight_leaves_bias_slices() {
        let mut sf = tiny_draft(3);
        sf.w_p.set_value(Tensor::zeros(vec![8, 24])).unwrap();
        let bias: Vec<f64> = (0..24).map(|i| i as f64 / 10.0).collect();
        sf.b_p
            .set_value(Tensor::new(vec![24], bias.clone()).unwrap())
            .unwrap();
        let i_d = Prng::new(3).normal_tensor::<f64>(&[1, 4, 8], 1.0).unwrap();
        let d = sf.positional_ffn(&i_d).unwrap();
        assert_eq!(d.shape(), &[1, 4, 3, 8]);
        for t in 0..4 {
            for j in 0..3 {
                for c in 0..8 {
                    assert_eq!(d.get(&[0, t, j, c]), bias[j * 8 + c]);
                }
            }
        }
    }

    #[test]
    fn positional_ffn_slices_match_independent_projection() {
        let sf = tiny_draft(3);
        let i_d = Prng::new(5).normal_tensor::<f64>(&[2, 3, 8], 1.0).unwrap();
        let d = sf.positional_ffn(&i_d).unwrap();
        let h = i_d.rms_norm(sf.head_norm.value(), 1e-6).unwrap();
        // slot j uses columns j*d..(j+1)*d of W_P and the same bias slice
        for j in 0..3 {
            let wj = sf.w_p.value().slice_axis(1, j * 8, 8).unwrap();
            let bj = sf.b_p.value().slice_axis(0, j * 8, 8).unwrap();
            let want = h
                .reshape(vec![6, 8])
                .unwrap()
                .matmul(&wj)
                .unwrap()
                .add(&bj)
                .unwrap();
            for r in 0..6 {
                for c in 0..8 {
                    let got = d.get(&[r / 3, r % 3, j, c]);
                    assert!((got - want.get(&[r, c])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn draft_block_double_residual_identity() {
        let mut sf = tiny_draft(3);
        sf.enc_wo.set_value(Tensor::zeros(vec![8, 8])).unwrap();
        sf.enc_w_down.set_value(Tensor::zeros(vec![16, 8])).unwrap();
        let d = Prng::new(7).normal_tensor::<f64>(&[1, 2, 3, 8], 1.0).unwrap();
        let e = sf.draft_bidirectional_block(&d).unwrap();
        assert_eq!(e.data(), d.data());
    }

    #[test]
    fn draft_block_is_permutation_equivariant_along_slots() {
        let sf = tiny_draft(4);
        let d = Prng::new(9).normal_tensor::<f64>(&[1, 2, 4, 8], 1.0).unwrap();
        let e = sf.draft_bidirectional_block(&d).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permute_slots = |x: &Tensor<f64>| {
            let slices: Vec<Tensor<f64>> = perm
                .iter()
                .map(|&j| x.slice_axis(2, j, 1).unwrap())
                .collect();
            let refs: Vec<&Tensor<f64>> = slices.iter().collect();
            Tensor::concat(&refs, 2).unwrap()
        };
        let e_of_permuted = sf.draft_bidirectional_block(&permute_slots(&d)).unwrap();
        let permuted_e = permute_slots(&e);
        for (a, b) in e_of_permuted.data().iter().zip(permuted_e.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn draft_logits_shape_and_constant_input() {
        let base = tiny_base();
        let sf = tiny_draft(4);
        let e = Tensor::<f64>::zeros(vec![1, 5, 4, 8]);
        let logits = sf.draft_logits(&e, &base).unwrap();
        assert_eq!(logits.shape(), &[1, 5, 4, 13]);
        // zero slot states all map through the same norm: identical rows
        let v = 13;
        let first = &logits.data()[..v];
        for row in 1..20 {
            assert_eq!(&logits.data()[row * v..(row + 1) * v], first);
        }
    }

    #[test]
    fn generate_draft_matches_manual_pipeline_composition() {
        let base = tiny_base();
        let sf = tiny_draft(3);
        let tokens = [1usize, 5, 2, 7];
        let taps = taps_of(&base, &tokens);
        let mut cache = base.new_cache().unwrap();
        let got = sf.generate_draft(&base, &taps, &mut cache).unwrap();
        assert_eq!(got.len(), 3);

        let mut manual_cache = base.new_cache().unwrap();
        let i_cat = hook_concat(&taps, sf.cat_scales.value(), sf.config().eps).unwrap();
        let i_d = sf
            .context_causal_attention(&i_cat, &mut manual_cache)
            .unwrap();
        let d = sf.positional_ffn(&i_d).unwrap();
        let e = sf.draft_bidirectional_block(&d).unwrap();
        let logits = sf.draft_logits(&e, &base).unwrap();
        let v = 13;
        let last = tokens.len() - 1;
        let manual: Vec<usize> = (0..3)
            .map(|j| {
                let off = (last * 3 + j) * v;
                greedy_next(&logits.data()[off..off + v])
            })
            .collect();
        assert_eq!(got, manual);
        // determinism
        let mut cache2 = base.new_cache().unwrap();
        assert_eq!(sf.generate_draft(&base, &taps, &mut cache2).unwrap(), got);
    }

    #[test]
    fn count_draft_params_partition() {
        for (d, l, ff, heads) in [(8usize, 3usize, 16usize, 2usize), (32, 4, 128, 4), (16, 1, 64, 2)] {
            let sf = SpecFormer::<f32>::init(
                SpecFormerConfig {
                    d_h: d,
                    l_d: l,
                    n_heads: heads,
                    d_ff: ff,
                    eps: 1e-6,
                    rope_base: 10000.0,
                },
                1,
            )
            .unwrap();
            let (m_s, m_p) = sf.count_draft_params();
            assert_eq!(m_p, d * d + d);
            assert_eq!(m_s, 12 * d * d + 3 * d * ff + 8 * d);
            assert_eq!(sf.count_params(), m_s + l * m_p);
        }
        // spec example: d_h=32, l_d=4 -> positional total 4224
        let sf = SpecFormer::<f32>::init(
            SpecFormerConfig {
                d_h: 32,
                l_d: 4,
                n_heads: 4,
                d_ff: 128,
                eps: 1e-6,
                rope_base: 10000.0,
            },
            1,
        )
        .unwrap();
        let (_, m_p) = sf.count_draft_params();
        assert_eq!(4 * m_p, 4224);
    }

    #[test]
    fn encode_graph_matches_plain_pipeline() {
        let base = tiny_base();
        let sf = tiny_draft(3);
        let tokens = [1usize, 5, 2, 7, 3, 11];
        let taps = taps_of(&base, &tokens);
        // plain path over the whole sequence with a fresh cache
        let i_cat = hook_concat(&taps, sf.cat_scales.value(), sf.config().eps).unwrap();
        let mut cache = base.new_cache().unwrap();
        let i_d = sf.context_causal_attention(&i_cat, &mut cache).unwrap();
        let d = sf.positional_ffn(&i_d).unwrap();
        let e_plain = sf.draft_bidirectional_block(&d).unwrap();
        // recorded path
        let mut g = Graph::new();
        let vars = sf.stage(&mut g);
        let raw = taps.concat_features().unwrap();
        let tv = g.constant(raw);
        let e = sf.encode_graph(&mut g, &vars, tv).unwrap();
        assert_eq!(g.value(e).shape(), &[1, 6, 3, 8]);
        for (a, b) in e_plain.data().iter().zip(g.value(e).data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn frozen_head_receives_no_gradient_but_slots_do() {
        let base = tiny_base();
        let sf = tiny_draft(2);
        let batch = vec![vec![1usize, 5, 2, 7, 3, 11, 4, 9]];
        let taps = taps_of(&base, &batch[0]);
        let mut g = Graph::new();
        let vars = sf.stage(&mut g);
        let tv = g.constant(taps.concat_features().unwrap());
        let e = sf.encode_graph(&mut g, &vars, tv).unwrap();
        let logits = sf.logits_graph(&mut g, e, &base).unwrap();
        let targets = slot_targets(&batch, 2).unwrap();
        let loss = g.cross_entropy(logits, &targets, IGNORE).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(e).is_some(), "slot states must receive gradient");
        assert!(g.grad(vars.w_p).is_some());
        assert!(g.grad(tv).is_none(), "frozen taps receive no gradient");
    }

    #[test]
    fn slot_target_layout_matches_worked_example() {
        // l_d=2 over [a,b,c,d]: position a trains on (c,d), b on (d, -),
        // c and d have no valid slots.
        let batch = vec![vec![10usize, 11, 12, 13]];
        let t = slot_targets(&batch, 2).unwrap();
        let ig = IGNORE;
        assert_eq!(t, vec![12, 13, 13, ig, ig, ig, ig, ig]);
        assert_eq!(slot_targets_for(&batch, 0).unwrap(), vec![12, 13, ig, ig]);
        assert_eq!(slot_targets_for(&batch, 1).unwrap(), vec![13, ig, ig, ig]);
    }
}
