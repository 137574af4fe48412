//! Reverse-mode automatic differentiation on a tape.
//!
//! A [`Graph`] records every operation as a node holding its output
//! value; [`Graph::backward`] replays the tape in reverse, accumulating
//! gradients into nodes that require them. Gradients can also be seeded
//! at an interior node ([`Graph::backward_seeded`]), which is what the
//! memory-frugal LM-head training path uses: per-slot losses deposit
//! their upstream gradients at the shared encoder output before one
//! combined sweep finishes the job.
//!
//! Forward values are computed by the same kernels as the plain
//! inference path, so a recorded forward is bit-identical to an
//! unrecorded one.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    attn_single, check_finite, cross_entropy_rows, matmul_general, rope_rows, silu, silu_prime,
    AttnMask, Tensor,
};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Gather { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, scale: Var, eps: f64 },
    GroupedRmsNorm { x: Var, scales: Var, groups: usize, eps: f64 },
    Silu(Var),
    Softmax { x: Var, axis: usize },
    Attention { q: Var, k: Var, v: Var, weights: Tensor<S> },
    Rope { x: Var, pos0: usize, base: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: usize, count: usize },
    Sum(Var),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    requires_grad: bool,
    op: Op<S>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// New differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, self.rg(a) || self.rg(b), Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, self.rg(a) || self.rg(b), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let value = self.value(x).scale(c)?;
        Ok(self.push(value, self.rg(x), Op::Scale(x, c)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, self.rg(a) || self.rg(b), Op::MatMul(a, b)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, self.rg(x), Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        Ok(self.push(value, self.rg(x), Op::Permute(x, perm.to_vec())))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, rg, Op::Concat(parts.to_vec(), axis)))
    }

    /// Row lookup: `table` is `(rows, d)`, output is `(ids.len(), d)`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("table must be rank 2, got {:?}", t.shape()),
            });
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::TokenRange { id, vocab: rows });
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            value,
            self.rg(table),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: f64) -> Result<Var> {
        let value = self.value(x).rms_norm(self.value(scale), eps)?;
        Ok(self.push(
            value,
            self.rg(x) || self.rg(scale),
            Op::RmsNorm { x, scale, eps },
        ))
    }

    pub fn grouped_rms_norm(&mut self, x: Var, scales: Var, groups: usize, eps: f64) -> Result<Var> {
        let value = self.value(x).grouped_rms_norm(self.value(scales), groups, eps)?;
        Ok(self.push(
            value,
            self.rg(x) || self.rg(scales),
            Op::GroupedRmsNorm { x, scales, groups, eps },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<S> = self.value(x).data().iter().map(|&v| silu(v)).collect();
        check_finite("silu", &data)?;
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(value, self.rg(x), Op::Silu(x)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).softmax(axis)?;
        Ok(self.push(value, self.rg(x), Op::Softmax { x, axis }))
    }

    /// Gated feed-forward: `(silu(x W_gate) * (x W_up)) W_down`.
    pub fn swiglu(&mut self, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
        let gate = self.matmul(x, w_gate)?;
        let gate = self.silu(gate)?;
        let up = self.matmul(x, w_up)?;
        let prod = self.mul(gate, up)?;
        self.matmul(prod, w_down)
    }

    /// Scaled-dot attention. `q` is `(..., tq, d)`, `k`/`v` are
    /// `(..., tk, d)` with identical leading dims; the optional mask is
    /// `(tq, tk)` and broadcasts over the leading dims. Masked entries
    /// receive `-inf` before the softmax; a fully-masked query row is an
    /// error.
    pub fn scaled_dot_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<AttnMask>,
    ) -> Result<Var> {
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        if qs.rank() < 2 || qs.rank() != ks.rank() || ks.shape() != vs.shape() {
            return Err(Error::Shape {
                op: "scaled_dot_attention",
                detail: format!(
                    "q {:?}, k {:?}, v {:?}",
                    qs.shape(),
                    ks.shape(),
                    vs.shape()
                ),
            });
        }
        let rank = qs.rank();
        if qs.shape()[..rank - 2] != ks.shape()[..rank - 2] {
            return Err(Error::Shape {
                op: "scaled_dot_attention",
                detail: format!("leading dims differ: q {:?}, k {:?}", qs.shape(), ks.shape()),
            });
        }
        let d = qs.shape()[rank - 1];
        if d != ks.shape()[rank - 1] || d == 0 {
            return Err(Error::Shape {
                op: "scaled_dot_attention",
                detail: format!("feature dims differ: q {:?}, k {:?}", qs.shape(), ks.shape()),
            });
        }
        let tq = qs.shape()[rank - 2];
        let tk = ks.shape()[rank - 2];
        if let Some(m) = &mask {
            if m.query_len() != tq || m.key_len() != tk {
                return Err(Error::Shape {
                    op: "scaled_dot_attention",
                    detail: format!(
                        "mask {}x{} vs scores {tq}x{tk}",
                        m.query_len(),
                        m.key_len()
                    ),
                });
            }
        }
        let batch: usize = qs.shape()[..rank - 2].iter().product();
        let scale = S::from_f64(1.0 / (d as f64).sqrt());
        let mut out = Vec::with_capacity(batch * tq * d);
        let mut weights = Vec::with_capacity(batch * tq * tk);
        for b in 0..batch {
            let (o, w) = attn_single(
                &qs.data()[b * tq * d..(b + 1) * tq * d],
                tq,
                &ks.data()[b * tk * d..(b + 1) * tk * d],
                tk,
                &vs.data()[b * tk * d..(b + 1) * tk * d],
                d,
                scale,
                mask.as_ref(),
            )?;
            out.extend_from_slice(&o);
            weights.extend_from_slice(&w);
        }
        let mut out_shape = qs.shape().to_vec();
        let mut w_shape = qs.shape()[..rank - 2].to_vec();
        w_shape.push(tq);
        w_shape.push(tk);
        out_shape[rank - 1] = d;
        let value = Tensor::new(out_shape, out)?;
        let weights = Tensor::new(w_shape, weights)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(value, rg, Op::Attention { q, k, v, weights }))
    }

    /// Rotary position embedding over `x: (batch, t, heads, head_dim)`;
    /// row `t` is rotated for absolute position `pos0 + t`.
    pub fn rope(&mut self, x: Var, pos0: usize, base: f64) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 4 {
            return Err(Error::Shape {
                op: "rope",
                detail: format!("expected (batch, t, heads, head_dim), got {:?}", xs.shape()),
            });
        }
        let (b, t, h, hd) = (xs.shape()[0], xs.shape()[1], xs.shape()[2], xs.shape()[3]);
        if hd % 2 != 0 {
            return Err(Error::Shape {
                op: "rope",
                detail: format!("head_dim {hd} must be even"),
            });
        }
        let mut data = xs.data().to_vec();
        for bi in 0..b {
            rope_rows(
                &mut data[bi * t * h * hd..(bi + 1) * t * h * hd],
                t,
                h,
                hd,
                pos0,
                base,
                false,
            );
        }
        check_finite("rope", &data)?;
        let value = Tensor::new(xs.shape().to_vec(), data)?;
        Ok(self.push(value, self.rg(x), Op::Rope { x, pos0, base }))
    }

    /// Mean negative log-likelihood over rows of `logits` (shape
    /// `(..., vocab)`) versus flattened `targets`, skipping entries whose
    /// target equals `ignore`. Returns a rank-0 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let ls = self.value(logits);
        if ls.rank() < 2 {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("logits must be rank >= 2, got {:?}", ls.shape()),
            });
        }
        let vocab = ls.shape()[ls.rank() - 1];
        let rows = ls.numel() / vocab.max(1);
        let (loss, count) = cross_entropy_rows(ls.data(), rows, vocab, targets, ignore)?;
        let value = Tensor::scalar(S::from_f64(loss))?;
        Ok(self.push(
            value,
            self.rg(logits),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                count,
            },
        ))
    }

    /// Sum of all elements, as a rank-0 node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = 0.0f64;
        for &v in self.value(x).data() {
            acc += v.to_f64();
        }
        let value = Tensor::scalar(S::from_f64(acc))?;
        Ok(self.push(value, self.rg(x), Op::Sum(x)))
    }

    /// Backward pass from a rank-0 loss node, seeding with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be a scalar, got {:?}", self.value(loss).shape()),
            });
        }
        let seed = Tensor::new(self.value(loss).shape().to_vec(), vec![S::one()])?;
        self.backward_seeded(loss, seed)
    }

    /// Backward pass seeding `at` with an explicit upstream gradient.
    pub fn backward_seeded(&mut self, at: Var, seed: Tensor<S>) -> Result<()> {
        if seed.shape() != self.value(at).shape() {
            return Err(Error::Shape {
                op: "backward_seeded",
                detail: format!(
                    "seed {:?} vs node {:?}",
                    seed.shape(),
                    self.value(at).shape()
                ),
            });
        }
        self.accumulate(at, seed)?;
        for i in (0..=at.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.clone().expect("checked above");
            let contribs = self.input_grads(i, &g)?;
            for (var, t) in contribs {
                self.accumulate(var, t)?;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, t: Tensor<S>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        if t.shape() != self.nodes[v.0].value.shape() {
            return Err(Error::Shape {
                op: "backward",
                detail: format!(
                    "gradient {:?} vs value {:?}",
                    t.shape(),
                    self.nodes[v.0].value.shape()
                ),
            });
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(t.data()) {
                    *a += *b;
                }
            }
            slot @ None => {
                *slot = Some(t);
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` (with upstream gradient `g`)
    /// to each of its inputs.
    fn input_grads(&self, i: usize, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Tensor<S>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.reduce_to_shape(self.value(*a).shape())?));
                }
                if self.rg(*b) {
                    out.push((*b, g.reduce_to_shape(self.value(*b).shape())?));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da = g.mul(self.value(*b))?;
                    out.push((*a, da.reduce_to_shape(self.value(*a).shape())?));
                }
                if self.rg(*b) {
                    let db = g.mul(self.value(*a))?;
                    out.push((*b, db.reduce_to_shape(self.value(*b).shape())?));
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    out.push((*x, g.scale(*c)?));
                }
            }
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let da = matmul_general(g, self.value(*b), false, true)?;
                    out.push((*a, da.reduce_to_shape(self.value(*a).shape())?));
                }
                if self.rg(*b) {
                    let db = matmul_general(self.value(*a), g, true, false)?;
                    out.push((*b, db.reduce_to_shape(self.value(*b).shape())?));
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    out.push((*x, g.reshape(self.value(*x).shape().to_vec())?));
                }
            }
            Op::Permute(x, perm) => {
                if self.rg(*x) {
                    let mut inv = vec![0usize; perm.len()];
                    for (d, &p) in perm.iter().enumerate() {
                        inv[p] = d;
                    }
                    out.push((*x, g.permute(&inv)?));
                }
            }
            Op::Concat(parts, axis) => {
                let mut start = 0usize;
                for &p in parts {
                    let extent = self.value(p).shape()[*axis];
                    if self.rg(p) {
                        out.push((p, g.slice_axis(*axis, start, extent)?));
                    }
                    start += extent;
                }
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let shape = self.value(*table).shape().to_vec();
                    let d = shape[1];
                    let mut dt = vec![S::zero(); shape[0] * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += g.data()[r * d + c];
                        }
                    }
                    out.push((*table, Tensor::new(shape, dt)?));
                }
            }
            Op::RmsNorm { x, scale, eps } => {
                let (dx, ds) = rms_backward(
                    self.value(*x).data(),
                    self.value(*scale).data(),
                    g.data(),
                    *eps,
                );
                if self.rg(*x) {
                    out.push((*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?));
                }
                if self.rg(*scale) {
                    out.push((*scale, Tensor::new(self.value(*scale).shape().to_vec(), ds)?));
                }
            }
            Op::GroupedRmsNorm { x, scales, groups, eps } => {
                let d = *self.value(*x).shape().last().expect("validated at forward");
                let slice = d / groups;
                let xd = self.value(*x).data();
                let sd = self.value(*scales).data();
                let mut dx = vec![S::zero(); xd.len()];
                let mut ds = vec![S::zero(); sd.len()];
                let rows = xd.len() / d;
                for r in 0..rows {
                    for gi in 0..*groups {
                        let base = r * d + gi * slice;
                        let (sdx, sds) = rms_backward_slice(
                            &xd[base..base + slice],
                            &sd[gi * slice..(gi + 1) * slice],
                            &g.data()[base..base + slice],
                            *eps,
                        );
                        for c in 0..slice {
                            dx[base + c] = sdx[c];
                            ds[gi * slice + c] += sds[c];
                        }
                    }
                }
                if self.rg(*x) {
                    out.push((*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?));
                }
                if self.rg(*scales) {
                    out.push((*scales, Tensor::new(self.value(*scales).shape().to_vec(), ds)?));
                }
            }
            Op::Silu(x) => {
                if self.rg(*x) {
                    let data: Vec<S> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| gv * silu_prime(xv))
                        .collect();
                    out.push((*x, Tensor::new(self.value(*x).shape().to_vec(), data)?));
                }
            }
            Op::Softmax { x, axis } => {
                if self.rg(*x) {
                    let y = &node.value;
                    let shape = y.shape();
                    let len = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let mut dx = vec![S::zero(); y.numel()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let mut dot = S::zero();
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot += g.data()[idx] * y.data()[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                dx[idx] = y.data()[idx] * (g.data()[idx] - dot);
                            }
                        }
                    }
                    out.push((*x, Tensor::new(shape.to_vec(), dx)?));
                }
            }
            Op::Attention { q, k, v, weights } => {
                let (qs, ks, vs) = (self.value(*q), self.value(*k), self.value(*v));
                let rank = qs.rank();
                let d = qs.shape()[rank - 1];
                let tq = qs.shape()[rank - 2];
                let tk = ks.shape()[rank - 2];
                let batch: usize = qs.shape()[..rank - 2].iter().product();
                let scale = S::from_f64(1.0 / (d as f64).sqrt());
                let mut dq = vec![S::zero(); qs.numel()];
                let mut dk = vec![S::zero(); ks.numel()];
                let mut dv = vec![S::zero(); vs.numel()];
                let mut da = vec![S::zero(); tq * tk];
                let mut dscore = vec![S::zero(); tq * tk];
                for b in 0..batch {
                    let qb = &qs.data()[b * tq * d..(b + 1) * tq * d];
                    let kb = &ks.data()[b * tk * d..(b + 1) * tk * d];
                    let vb = &vs.data()[b * tk * d..(b + 1) * tk * d];
                    let ab = &weights.data()[b * tq * tk..(b + 1) * tq * tk];
                    let gb = &g.data()[b * tq * d..(b + 1) * tq * d];
                    // dV = A^T g ; dA = g V^T
                    for i in 0..tq {
                        for j in 0..tk {
                            let mut acc = S::zero();
                            for c in 0..d {
                                acc += gb[i * d + c] * vb[j * d + c];
                            }
                            da[i * tk + j] = acc;
                        }
                    }
                    for j in 0..tk {
                        for c in 0..d {
                            let mut acc = S::zero();
                            for i in 0..tq {
                                acc += ab[i * tk + j] * gb[i * d + c];
                            }
                            dv[b * tk * d + j * d + c] += acc;
                        }
                    }
                    // dS = A o (dA - rowsum(dA o A)); masked entries have
                    // A == 0 and therefore dS == 0.
                    for i in 0..tq {
                        let mut dot = S::zero();
                        for j in 0..tk {
                            dot += da[i * tk + j] * ab[i * tk + j];
                        }
                        for j in 0..tk {
                            dscore[i * tk + j] = ab[i * tk + j] * (da[i * tk + j] - dot);
                        }
                    }
                    // dQ = dS K * scale ; dK = dS^T Q * scale
                    for i in 0..tq {
                        for c in 0..d {
                            let mut acc = S::zero();
                            for j in 0..tk {
                                acc += dscore[i * tk + j] * kb[j * d + c];
                            }
                            dq[b * tq * d + i * d + c] += acc * scale;
                        }
                    }
                    for j in 0..tk {
                        for c in 0..d {
                            let mut acc = S::zero();
                            for i in 0..tq {
                                acc += dscore[i * tk + j] * qb[i * d + c];
                            }
                            dk[b * tk * d + j * d + c] += acc * scale;
                        }
                    }
                }
                if self.rg(*q) {
                    out.push((*q, Tensor::new(qs.shape().to_vec(), dq)?));
                }
                if self.rg(*k) {
                    out.push((*k, Tensor::new(ks.shape().to_vec(), dk)?));
                }
                if self.rg(*v) {
                    out.push((*v, Tensor::new(vs.shape().to_vec(), dv)?));
                }
            }
            Op::Rope { x, pos0, base } => {
                if self.rg(*x) {
                    let xs = self.value(*x);
                    let (b, t, h, hd) = (
                        xs.shape()[0],
                        xs.shape()[1],
                        xs.shape()[2],
                        xs.shape()[3],
                    );
                    // The rotation is orthogonal; its adjoint is the
                    // inverse rotation applied to the upstream gradient.
                    let mut data = g.data().to_vec();
                    for bi in 0..b {
                        rope_rows(
                            &mut data[bi * t * h * hd..(bi + 1) * t * h * hd],
                            t,
                            h,
                            hd,
                            *pos0,
                            *base,
                            true,
                        );
                    }
                    out.push((*x, Tensor::new(xs.shape().to_vec(), data)?));
                }
            }
            Op::CrossEntropy { logits, targets, ignore, count } => {
                if self.rg(*logits) {
                    let ls = self.value(*logits);
                    let vocab = ls.shape()[ls.rank() - 1];
                    let gs = g.data()[0];
                    let inv = S::from_f64(1.0 / *count as f64);
                    let mut dl = vec![S::zero(); ls.numel()];
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let row = &ls.data()[r * vocab..(r + 1) * vocab];
                        // Stable per-row softmax in double precision.
                        let mut mx = f64::NEG_INFINITY;
                        for &x in row {
                            mx = mx.max(x.to_f64());
                        }
                        let mut sum = 0.0f64;
                        for &x in row {
                            sum += (x.to_f64() - mx).exp();
                        }
                        for c in 0..vocab {
                            let p = S::from_f64((row[c].to_f64() - mx).exp() / sum);
                            let delta = if c == t { S::one() } else { S::zero() };
                            dl[r * vocab + c] = gs * inv * (p - delta);
                        }
                    }
                    out.push((*logits, Tensor::new(ls.shape().to_vec(), dl)?));
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let gs = g.data()[0];
                    let xs = self.value(*x);
                    out.push((*x, Tensor::full(xs.shape().to_vec(), gs)?));
                }
            }
        }
        Ok(out)
    }
}

/// Backward of `y = x / sqrt(mean(x^2) + eps) * scale` over rows of
/// width `scale.len()`. Returns `(dx, dscale)`.
fn rms_backward<S: Scalar>(x: &[S], scale: &[S], g: &[S], eps: f64) -> (Vec<S>, Vec<S>) {
    let d = scale.len();
    let rows = x.len() / d;
    let mut dx = vec![S::zero(); x.len()];
    let mut ds = vec![S::zero(); d];
    for r in 0..rows {
        let (rdx, rds) = rms_backward_slice(&x[r * d..(r + 1) * d], scale, &g[r * d..(r + 1) * d], eps);
        for c in 0..d {
            dx[r * d + c] = rdx[c];
            ds[c] += rds[c];
        }
    }
    (dx, ds)
}

fn rms_backward_slice<S: Scalar>(x: &[S], scale: &[S], g: &[S], eps: f64) -> (Vec<S>, Vec<S>) {
    let d = x.len();
    let df = S::from_f64(d as f64);
    let mut ms = S::zero();
    for &v in x {
        ms += v * v;
    }
    let inv = S::one() / (ms / df + S::from_f64(eps)).sqrt();
    // dot = sum_i g_i * scale_i * x_i
    let mut dot = S::zero();
    for i in 0..d {
        dot += g[i] * scale[i] * x[i];
    }
    let inv3 = inv * inv * inv;
    let mut dx = vec![S::zero(); d];
    let mut ds = vec![S::zero(); d];
    for i in 0..d {
        dx[i] = g[i] * scale[i] * inv - x[i] * inv3 / df * dot;
        ds[i] = g[i] * x[i] * inv;
    }
    (dx, ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn recorded_forward_matches_plain_kernels_bitwise() {
        let mut prng = Prng::new(31);
        let a = prng.normal_tensor::<f32>(&[3, 4], 1.0).unwrap();
        let b = prng.normal_tensor::<f32>(&[4, 5], 1.0).unwrap();
        let plain = a.matmul(&b).unwrap();
        let mut g = Graph::new();
        let va = g.leaf(a, true);
        let vb = g.leaf(b, true);
        let vc = g.matmul(va, vb).unwrap();
        assert_eq!(g.value(vc), &plain);
    }

    #[test]
    fn backward_of_square_sum_is_twice_input() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        let gx = g.grad(x).unwrap();
        assert_eq!(gx.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn gradients_accumulate_across_uses_and_skip_constants() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0).unwrap(), true);
        let c = g.constant(Tensor::scalar(2.0).unwrap());
        let prod = g.mul(x, c).unwrap(); // 2x
        let total = g.add(prod, x).unwrap(); // 3x
        let loss = g.sum(total).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn broadcast_add_reduces_gradient_to_bias_shape() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![2, 3]), true);
        let bias = g.leaf(Tensor::zeros(vec![3]), true);
        let y = g.add(x, bias).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(bias).unwrap().shape(), &[3]);
        assert_eq!(g.grad(bias).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_seeded_at_interior_node_stops_downstream() {
        // y = (2x) then z = y*y. Seeding at y must not involve z at all.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(5.0).unwrap(), true);
        let y = g.scale(x, 2.0).unwrap();
        let z = g.mul(y, y).unwrap();
        g.backward_seeded(y, Tensor::scalar(1.0).unwrap()).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
        assert!(g.grad(z).is_none());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot_over_count() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::new(vec![1, 3], vec![0.0, 1.0, 2.0]).unwrap(), true);
        let loss = g.cross_entropy(logits, &[2], usize::MAX).unwrap();
        g.backward(loss).unwrap();
        let gl = g.grad(logits).unwrap();
        let z: f64 = (0.0f64).exp() + (1.0f64).exp() + (2.0f64).exp();
        let expect = [
            (0.0f64).exp() / z,
            (1.0f64).exp() / z,
            (2.0f64).exp() / z - 1.0,
        ];
        for (a, b) in gl.data().iter().zip(expect.iter()) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn attention_matches_manual_composition() {
        // Unmasked fused attention equals softmax(QK^T/sqrt(d)) V built
        // from the building-block ops.
        let mut prng = Prng::new(77);
        let q = prng.normal_tensor::<f64>(&[2, 3, 4], 1.0).unwrap();
        let k = prng.normal_tensor::<f64>(&[2, 5, 4], 1.0).unwrap();
        let v = prng.normal_tensor::<f64>(&[2, 5, 4], 1.0).unwrap();

        let mut g = Graph::new();
        let (vq, vk, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let fused = g.scaled_dot_attention(vq, vk, vv, None).unwrap();

        let kt = k.permute(&[0, 2, 1]).unwrap();
        let scores = q.matmul(&kt).unwrap().scale(0.5).unwrap(); // 1/sqrt(4)
        let weights = scores.softmax(2).unwrap();
        let manual = weights.matmul(&v).unwrap();
        for (a, b) in g.value(fused).data().iter().zip(manual.data()) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn causal_attention_blocks_future_keys() {
        let mut prng = Prng::new(13);
        let q = prng.normal_tensor::<f64>(&[1, 4, 4], 1.0).unwrap();
        let k = prng.normal_tensor::<f64>(&[1, 4, 4], 1.0).unwrap();
        let mut v1 = prng.normal_tensor::<f64>(&[1, 4, 4], 1.0).unwrap();
        let mut g1 = Graph::new();
        let out1 = {
            let (a, b, c) = (g1.constant(q.clone()), g1.constant(k.clone()), g1.constant(v1.clone()));
            g1.scaled_dot_attention(a, b, c, Some(AttnMask::causal(4, 4, 0))).unwrap()
        };
        // Perturb only the last value row: earlier outputs may not move.
        for x in &mut v1.data_mut()[12..16] {
            *x += 10.0;
        }
        let mut g2 = Graph::new();
        let out2 = {
            let (a, b, c) = (g2.constant(q), g2.constant(k), g2.constant(v1));
            g2.scaled_dot_attention(a, b, c, Some(AttnMask::causal(4, 4, 0))).unwrap()
        };
        let d1 = g1.value(out1).data();
        let d2 = g2.value(out2).data();
        assert_eq!(&d1[..12], &d2[..12]);
        assert_ne!(&d1[12..], &d2[12..]);
    }

    #[test]
    fn gather_scatters_gradient_rows() {
        let mut g = Graph::<f64>::new();
        let table = g.leaf(Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap(), true);
        let rows = g.gather(table, &[2, 0, 2]).unwrap();
        let loss = g.sum(rows).unwrap();
        g.backward(loss).unwrap();
        let gt = g.grad(table).unwrap();
        assert_eq!(gt.data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!({
            let mut g2 = Graph::<f64>::new();
            let t = g2.leaf(Tensor::zeros(vec![3, 2]), true);
            g2.gather(t, &[3]).is_err()
        });
    }

    #[test]
    fn swiglu_with_zero_down_projection_is_zero() {
        let mut prng = Prng::new(4);
        let mut g = Graph::<f64>::new();
        let x = g.constant(prng.normal_tensor(&[2, 3], 1.0).unwrap());
        let wg = g.constant(prng.normal_tensor(&[3, 8], 1.0).unwrap());
        let wu = g.constant(prng.normal_tensor(&[3, 8], 1.0).unwrap());
        let wd = g.constant(Tensor::zeros(vec![8, 3]));
        let y = g.swiglu(x, wg, wu, wd).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
