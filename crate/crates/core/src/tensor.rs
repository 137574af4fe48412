//! Dense row-major tensors and the numeric kernels shared by the plain
//! inference path and the autodiff tape.
//!
//! Design rules:
//!
//! * Every public operation validates shapes and returns finite values;
//!   NaN/Inf is an error, never a silent result.
//! * Reductions always run in a fixed ascending order. Decoding a
//!   sequence one token at a time must reproduce the same bits as
//!   decoding it in chunks, and that only holds if the kernels never
//!   reorder accumulation based on operand size.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. A rank-0 tensor (empty shape) holds one scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_finite<S: Scalar>(op: &'static str, data: &[S]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Broadcast two shapes right-aligned; each dim pair must be equal or
/// one of them 1 (missing dims count as 1).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::Shape {
                op,
                detail: format!("cannot broadcast {a:?} with {b:?}"),
            });
        };
    }
    Ok(out)
}

/// Strides for reading a tensor of `shape` as if it had `out_shape`
/// (stride 0 on broadcast dims). `shape` must be right-aligned
/// broadcast-compatible with `out_shape`.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    let pad = out_shape.len() - shape.len();
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..out_shape.len() {
        if i >= pad && shape[i - pad] == out_shape[i] && shape[i - pad] != 0 {
            out[i] = if shape[i - pad] == 1 { 0 } else { strides[i - pad] };
        } else {
            out[i] = 0;
        }
    }
    out
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, checking element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::Shape {
                op: "tensor::new",
                detail: format!("shape {shape:?} wants {} elements, got {}", numel_of(&shape), data.len()),
            });
        }
        check_finite("tensor::new", &data)?;
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Result<Self> {
        let n = numel_of(&shape);
        Tensor::new(shape, vec![value; n])
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![S::one(); n],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: S) -> Result<Self> {
        Tensor::new(Vec::new(), vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Element at a fully-specified index.
    pub fn get(&self, idx: &[usize]) -> S {
        debug_assert_eq!(idx.len(), self.shape.len());
        let strides = strides_of(&self.shape);
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<S>> {
        if numel_of(&shape) != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?} changes element count", self.shape),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Elementwise binary op with broadcasting.
    fn zip_broadcast(
        &self,
        other: &Tensor<S>,
        op: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        let out_shape = broadcast_shape(op, &self.shape, &other.shape)?;
        let n = numel_of(&out_shape);
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut data = Vec::with_capacity(n);
        let mut coords = vec![0usize; out_shape.len()];
        for _ in 0..n {
            let oa: usize = coords.iter().zip(&sa).map(|(c, s)| c * s).sum();
            let ob: usize = coords.iter().zip(&sb).map(|(c, s)| c * s).sum();
            data.push(f(self.data[oa], other.data[ob]));
            for d in (0..out_shape.len()).rev() {
                coords[d] += 1;
                if coords[d] < out_shape[d] {
                    break;
                }
                coords[d] = 0;
            }
        }
        check_finite(op, &data)?;
        Ok(Tensor { shape: out_shape, data })
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_broadcast(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_broadcast(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: S) -> Result<Tensor<S>> {
        let data: Vec<S> = self.data.iter().map(|&x| x * c).collect();
        check_finite("scale", &data)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Batched matrix product; see [`matmul_general`].
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        matmul_general(self, other, false, false)
    }

    /// RMS normalization over the last axis followed by a learned
    /// elementwise scale: `y = x / sqrt(mean(x^2) + eps) * scale`.
    pub fn rms_norm(&self, scale: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
        let d = self.last_dim("rms_norm")?;
        if scale.shape != [d] {
            return Err(Error::Shape {
                op: "rms_norm",
                detail: format!("scale shape {:?} does not match last dim {d}", scale.shape),
            });
        }
        validate_eps(eps)?;
        let mut data = vec![S::zero(); self.data.len()];
        for (row_i, row) in self.data.chunks_exact(d).enumerate() {
            rms_norm_row(row, scale.data(), eps, &mut data[row_i * d..(row_i + 1) * d]);
        }
        check_finite("rms_norm", &data)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Splits the last axis into `groups` equal slices and RMS-normalizes
    /// each slice with its own scale vector. `group_scales` has shape
    /// `(groups, slice_dim)`.
    pub fn grouped_rms_norm(
        &self,
        group_scales: &Tensor<S>,
        groups: usize,
        eps: f64,
    ) -> Result<Tensor<S>> {
        let d = self.last_dim("grouped_rms_norm")?;
        if groups == 0 || d % groups != 0 {
            return Err(Error::Shape {
                op: "grouped_rms_norm",
                detail: format!("last dim {d} not divisible into {groups} groups"),
            });
        }
        let slice = d / groups;
        if group_scales.shape != [groups, slice] {
            return Err(Error::Shape {
                op: "grouped_rms_norm",
                detail: format!(
                    "group_scales shape {:?}, expected [{groups}, {slice}]",
                    group_scales.shape
                ),
            });
        }
        validate_eps(eps)?;
        let mut data = vec![S::zero(); self.data.len()];
        for (row_i, row) in self.data.chunks_exact(d).enumerate() {
            for g in 0..groups {
                let xs = &row[g * slice..(g + 1) * slice];
                let sc = &group_scales.data()[g * slice..(g + 1) * slice];
                let base = row_i * d + g * slice;
                rms_norm_row(xs, sc, eps, &mut data[base..base + slice]);
            }
        }
        check_finite("grouped_rms_norm", &data)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        if axis >= self.shape.len() {
            return Err(Error::Shape {
                op: "softmax",
                detail: format!("axis {axis} out of range for shape {:?}", self.shape),
            });
        }
        let mut data = self.data.clone();
        softmax_axis_inplace(&mut data, &self.shape, axis)?;
        check_finite("softmax", &data)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Argmax over the last axis, ties resolved to the lowest index.
    pub fn argmax_last(&self) -> Result<Vec<usize>> {
        let d = self.last_dim("argmax_last")?;
        Ok(self.data.chunks_exact(d).map(argmax_row).collect())
    }

    /// Concatenation along `axis`; all other extents must match.
    pub fn concat(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat",
                detail: "no tensors given".into(),
            });
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        let mut out_shape = parts[0].shape.clone();
        out_shape[axis] = 0;
        for p in parts {
            if p.rank() != rank {
                return Err(Error::Shape {
                    op: "concat",
                    detail: "rank mismatch".into(),
                });
            }
            for d in 0..rank {
                if d != axis && p.shape[d] != parts[0].shape[d] {
                    return Err(Error::Shape {
                        op: "concat",
                        detail: format!("shapes {:?} vs {:?}", parts[0].shape, p.shape),
                    });
                }
            }
            out_shape[axis] += p.shape[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for p in parts {
                let span = p.shape[axis] * inner;
                let start = o * span;
                data.extend_from_slice(&p.data[start..start + span]);
            }
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Contiguous slice `[start, start+len)` along `axis` (extent kept).
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(Error::Shape {
                op: "slice_axis",
                detail: format!(
                    "slice [{start}, {}) on axis {axis} of shape {:?}",
                    start + len,
                    self.shape
                ),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let span = self.shape[axis] * inner;
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * span + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Selects one index along `axis`, dropping that axis.
    pub fn index_axis(&self, axis: usize, idx: usize) -> Result<Tensor<S>> {
        let sliced = self.slice_axis(axis, idx, 1)?;
        let mut shape = sliced.shape.clone();
        shape.remove(axis);
        Ok(Tensor {
            shape,
            data: sliced.data,
        })
    }

    /// Axis permutation (generalized transpose).
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<S>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape {
                op: "permute",
                detail: format!("invalid permutation {perm:?} for rank {rank}"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides_of(&self.shape);
        let mut data = Vec::with_capacity(self.data.len());
        let mut coords = vec![0usize; rank];
        for _ in 0..self.data.len().max(1) {
            if self.data.is_empty() {
                break;
            }
            let off: usize = coords
                .iter()
                .enumerate()
                .map(|(d, &c)| c * in_strides[perm[d]])
                .sum();
            data.push(self.data[off]);
            for d in (0..rank).rev() {
                coords[d] += 1;
                if coords[d] < out_shape[d] {
                    break;
                }
                coords[d] = 0;
            }
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Sums down to `target` shape (inverse of broadcasting).
    pub(crate) fn reduce_to_shape(&self, target: &[usize]) -> Result<Tensor<S>> {
        let out_n = numel_of(target);
        let mut out = vec![S::zero(); out_n];
        let st = broadcast_strides(target, &self.shape);
        let mut coords = vec![0usize; self.shape.len()];
        for &x in &self.data {
            let off: usize = coords.iter().zip(&st).map(|(c, s)| c * s).sum();
            out[off] += x;
            for d in (0..self.shape.len()).rev() {
                coords[d] += 1;
                if coords[d] < self.shape[d] {
                    break;
                }
                coords[d] = 0;
            }
        }
        Tensor::new(target.to_vec(), out)
    }

    fn last_dim(&self, op: &'static str) -> Result<usize> {
        match self.shape.last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(Error::Shape {
                op,
                detail: format!("needs a non-empty last axis, shape {:?}", self.shape),
            }),
        }
    }

    /// Converts every element to `f64`.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x.to_f64()).collect()
    }
}

fn validate_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParam {
            name: "eps",
            detail: format!("must be positive and finite, got {eps}"),
        })
    }
}

pub(crate) fn rms_norm_row<S: Scalar>(x: &[S], scale: &[S], eps: f64, out: &mut [S]) {
    let d = x.len();
    let mut ms = S::zero();
    for &v in x {
        ms += v * v;
    }
    let denom = (ms / S::from_f64(d as f64) + S::from_f64(eps)).sqrt();
    let inv = S::one() / denom;
    for i in 0..d {
        out[i] = x[i] * inv * scale[i];
    }
}

/// Batched matrix product with optional transposition of the trailing
/// two axes. Leading (batch) dims broadcast: they must be equal, 1, or
/// absent on one side. Accumulation runs over the contraction index in
/// ascending order.
pub(crate) fn matmul_general<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    ta: bool,
    tb: bool,
) -> Result<Tensor<S>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("needs rank >= 2, got {:?} and {:?}", a.shape, b.shape),
        });
    }
    let (ar0, ar1) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (br0, br1) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    let (m, k) = if ta { (ar1, ar0) } else { (ar0, ar1) };
    let (k2, n) = if tb { (br1, br0) } else { (br0, br1) };
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!(
                "inner dims disagree: {:?}{} x {:?}{}",
                a.shape,
                if ta { "^T" } else { "" },
                b.shape,
                if tb { "^T" } else { "" }
            ),
        });
    }
    let a_batch = &a.shape[..a.rank() - 2];
    let b_batch = &b.shape[..b.rank() - 2];
    let batch = broadcast_shape("matmul", a_batch, b_batch)?;
    let sa = broadcast_strides(a_batch, &batch);
    let sb = broadcast_strides(b_batch, &batch);
    let a_mat = ar0 * ar1;
    let b_mat = br0 * br1;
    let n_batch = numel_of(&batch);

    let mut out_shape = batch.clone();
    out_shape.push(m);
    out_shape.push(n);
    let mut data = vec![S::zero(); n_batch * m * n];

    let mut coords = vec![0usize; batch.len()];
    for bi in 0..n_batch {
        let a_off: usize = coords.iter().zip(&sa).map(|(c, s)| c * s).sum::<usize>() * a_mat;
        let b_off: usize = coords.iter().zip(&sb).map(|(c, s)| c * s).sum::<usize>() * b_mat;
        let out_off = bi * m * n;
        for i in 0..m {
            for j in 0..n {
                let mut acc = S::zero();
                for t in 0..k {
                    let av = if ta {
                        a.data[a_off + t * ar1 + i]
                    } else {
                        a.data[a_off + i * ar1 + t]
                    };
                    let bv = if tb {
                        b.data[b_off + j * br1 + t]
                    } else {
                        b.data[b_off + t * br1 + j]
                    };
                    acc += av * bv;
                }
                data[out_off + i * n + j] = acc;
            }
        }
        for d in (0..batch.len()).rev() {
            coords[d] += 1;
            if coords[d] < batch[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    check_finite("matmul", &data)?;
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

/// Boolean attention mask over `(query_len, key_len)`; `true` blocks the
/// pair. The same mask applies across all leading (batch/head) dims.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    tq: usize,
    tk: usize,
    blocked: Vec<bool>,
}

impl AttnMask {
    pub fn from_blocked(tq: usize, tk: usize, blocked: Vec<bool>) -> Result<Self> {
        if blocked.len() != tq * tk {
            return Err(Error::Shape {
                op: "mask",
                detail: format!("blocked len {} != {tq}x{tk}", blocked.len()),
            });
        }
        Ok(AttnMask { tq, tk, blocked })
    }

    /// Causal mask where query `i` sits at absolute position `offset + i`
    /// and may attend keys `0..=offset + i`.
    pub fn causal(tq: usize, tk: usize, offset: usize) -> Self {
        let mut blocked = vec![false; tq * tk];
        for i in 0..tq {
            for j in 0..tk {
                blocked[i * tk + j] = j > offset + i;
            }
        }
        AttnMask { tq, tk, blocked }
    }

    pub fn query_len(&self) -> usize {
        self.tq
    }

    pub fn key_len(&self) -> usize {
        self.tk
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.tk + j]
    }
}

/// Single-matrix scaled-dot attention over `(tq, d) x (tk, d)`.
/// Returns the context rows and the post-softmax weights `(tq, tk)`.
pub(crate) fn attn_single<S: Scalar>(
    q: &[S],
    tq: usize,
    k: &[S],
    tk: usize,
    v: &[S],
    d: usize,
    scale: S,
    mask: Option<&AttnMask>,
) -> Result<(Vec<S>, Vec<S>)> {
    let mut weights = vec![S::zero(); tq * tk];
    let mut out = vec![S::zero(); tq * d];
    let mut scores = vec![S::zero(); tk];
    for i in 0..tq {
        let mut any = false;
        for j in 0..tk {
            let blocked = mask.map(|m| m.is_blocked(i, j)).unwrap_or(false);
            if blocked {
                scores[j] = S::neg_infinity();
            } else {
                any = true;
                let mut dot = S::zero();
                for c in 0..d {
                    dot += q[i * d + c] * k[j * d + c];
                }
                scores[j] = dot * scale;
            }
        }
        if !any {
            return Err(Error::FullyMasked { row: i });
        }
        softmax_row_inplace(&mut scores);
        for j in 0..tk {
            weights[i * tk + j] = scores[j];
        }
        for j in 0..tk {
            let w = scores[j];
            if w != S::zero() {
                for c in 0..d {
                    out[i * d + c] += w * v[j * d + c];
                }
            }
        }
    }
    check_finite("scaled_dot_attention", &out)?;
    Ok((out, weights))
}

/// Stable softmax of one row in place; `-inf` entries become exact zeros.
pub(crate) fn softmax_row_inplace<S: Scalar>(row: &mut [S]) {
    let mut mx = S::neg_infinity();
    for &x in row.iter() {
        if x > mx {
            mx = x;
        }
    }
    let mut sum = S::zero();
    for x in row.iter_mut() {
        if *x == S::neg_infinity() {
            *x = S::zero();
        } else {
            *x = (*x - mx).exp();
            sum += *x;
        }
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

pub(crate) fn softmax_axis_inplace<S: Scalar>(
    data: &mut [S],
    shape: &[usize],
    axis: usize,
) -> Result<()> {
    let len = shape[axis];
    if len == 0 {
        return Err(Error::Shape {
            op: "softmax",
            detail: "empty softmax axis".into(),
        });
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut lane = vec![S::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for j in 0..len {
                lane[j] = data[base + j * inner];
            }
            softmax_row_inplace(&mut lane);
            for j in 0..len {
                data[base + j * inner] = lane[j];
            }
        }
    }
    Ok(())
}

/// Rotary position embedding applied in place to rows laid out as
/// `(t_len, heads, head_dim)`. Row `t` is rotated for absolute position
/// `pos0 + t`. `inverse` applies the opposite rotation (used by the
/// backward pass). Angles are computed in double precision.
pub(crate) fn rope_rows<S: Scalar>(
    data: &mut [S],
    t_len: usize,
    heads: usize,
    head_dim: usize,
    pos0: usize,
    base: f64,
    inverse: bool,
) {
    debug_assert_eq!(data.len(), t_len * heads * head_dim);
    debug_assert_eq!(head_dim % 2, 0);
    let half = head_dim / 2;
    for t in 0..t_len {
        let pos = (pos0 + t) as f64;
        for h in 0..heads {
            let row = (t * heads + h) * head_dim;
            for i in 0..half {
                let theta = pos * base.powf(-2.0 * i as f64 / head_dim as f64);
                let (sin, cos) = theta.sin_cos();
                let sin = if inverse { -sin } else { sin };
                let x0 = data[row + 2 * i].to_f64();
                let x1 = data[row + 2 * i + 1].to_f64();
                data[row + 2 * i] = S::from_f64(x0 * cos - x1 * sin);
                data[row + 2 * i + 1] = S::from_f64(x0 * sin + x1 * cos);
            }
        }
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

pub(crate) fn silu_prime<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

/// Argmax of a row; ties resolve to the lowest index.
pub(crate) fn argmax_row<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0usize;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Mean negative log-likelihood of `targets` under rows of logits,
/// skipping rows whose target equals `ignore`. Returns the mean and the
/// number of contributing rows. Accumulates in double precision.
pub(crate) fn cross_entropy_rows<S: Scalar>(
    logits: &[S],
    rows: usize,
    vocab: usize,
    targets: &[usize],
    ignore: usize,
) -> Result<(f64, usize)> {
    if targets.len() != rows {
        return Err(Error::Shape {
            op: "cross_entropy",
            detail: format!("{} targets for {rows} rows", targets.len()),
        });
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (r, &t) in targets.iter().enumerate() {
        if t == ignore {
            continue;
        }
        if t >= vocab {
            return Err(Error::TokenRange { id: t, vocab });
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let mut mx = f64::NEG_INFINITY;
        for &x in row {
            mx = mx.max(x.to_f64());
        }
        let mut sum = 0.0f64;
        for &x in row {
            sum += (x.to_f64() - mx).exp();
        }
        total += mx + sum.ln() - row[t].to_f64();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyLoss("cross_entropy"));
    }
    Ok((total / count as f64, count))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn new_rejects_bad_len_and_nonfinite() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::<f32>::new(vec![2], vec![1.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn matmul_identity_and_known_product() {
        let eye = Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap(), m);
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let b = Tensor::<f64>::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let p = m.matmul(&b).unwrap();
        assert_eq!(p.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_reference() {
        let mut prng = crate::prng::Prng::new(11);
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (2, 3, 4), (8, 8, 8), (5, 7, 2)] {
            let a = prng.normal_tensor::<f64>(&[m, k], 1.0).unwrap();
            let b = prng.normal_tensor::<f64>(&[k, n], 1.0).unwrap();
            let got = a.matmul(&b).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for t in 0..k {
                        acc += a.get(&[i, t]) * b.get(&[t, j]);
                    }
                    assert!(
                        close(got.get(&[i, j]), acc, 1e-6),
                        "({i},{j}): {} vs {acc}",
                        got.get(&[i, j])
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_broadcasts_batch_dims_by_equality() {
        let mut prng = crate::prng::Prng::new(5);
        let a = prng.normal_tensor::<f64>(&[2, 3, 4, 5], 1.0).unwrap();
        let w = prng.normal_tensor::<f64>(&[5, 6], 1.0).unwrap();
        let out = a.matmul(&w).unwrap();
        assert_eq!(out.shape(), &[2, 3, 4, 6]);
        // Batched-by-equality right operand.
        let b = prng.normal_tensor::<f64>(&[2, 3, 5, 6], 1.0).unwrap();
        let out2 = a.matmul(&b).unwrap();
        assert_eq!(out2.shape(), &[2, 3, 4, 6]);
        // Spot-check one batch slice against the 2-D product.
        let a_slice = a.index_axis(0, 1).unwrap().index_axis(0, 2).unwrap();
        let b_slice = b.index_axis(0, 1).unwrap().index_axis(0, 2).unwrap();
        let expect = a_slice.matmul(&b_slice).unwrap();
        let got = out2.index_axis(0, 1).unwrap().index_axis(0, 2).unwrap();
        assert_eq!(got, expect);
        // Mismatched batch dims (3 vs 2) must fail.
        let bad = prng.normal_tensor::<f64>(&[2, 5, 6], 1.0).unwrap();
        assert!(matmul_general(&a.index_axis(0, 0).unwrap(), &bad, false, false).is_err());
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![4, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn rms_norm_unit_scale_gives_unit_mean_square() {
        let mut prng = crate::prng::Prng::new(9);
        let x = prng.normal_tensor::<f64>(&[3, 8], 2.0).unwrap();
        let scale = Tensor::<f64>::ones(vec![8]);
        let y = x.rms_norm(&scale, 1e-12).unwrap();
        for row in y.data().chunks_exact(8) {
            let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / 8.0;
            assert!(close(ms, 1.0, 1e-6), "mean square {ms}");
        }
    }

    #[test]
    fn rms_norm_is_scale_equivariant_per_coordinate() {
        // Doubling one scale entry doubles exactly that output column.
        let x = Tensor::<f64>::new(vec![1, 4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let s1 = Tensor::<f64>::ones(vec![4]);
        let mut s2 = s1.clone();
        s2.data_mut()[2] = 2.0;
        let y1 = x.rms_norm(&s1, 1e-9).unwrap();
        let y2 = x.rms_norm(&s2, 1e-9).unwrap();
        for i in 0..4 {
            let f = if i == 2 { 2.0 } else { 1.0 };
            assert!(close(y2.data()[i], f * y1.data()[i], 1e-12));
        }
    }

    #[test]
    fn grouped_rms_norm_equals_per_slice_rms_norm() {
        let mut prng = crate::prng::Prng::new(21);
        let x = prng.normal_tensor::<f64>(&[2, 5, 12], 1.5).unwrap();
        let scales = prng.normal_tensor::<f64>(&[4, 3], 0.3).unwrap();
        let got = x.grouped_rms_norm(&scales, 4, 1e-6).unwrap();
        // Oracle: slice the last axis, RMS-normalize each slice alone,
        // and concatenate.
        let mut parts = Vec::new();
        for g in 0..4 {
            let xs = x.slice_axis(2, g * 3, 3).unwrap();
            let sc = Tensor::<f64>::new(vec![3], scales.data()[g * 3..(g + 1) * 3].to_vec()).unwrap();
            parts.push(xs.rms_norm(&sc, 1e-6).unwrap());
        }
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let expect = Tensor::concat(&refs, 2).unwrap();
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn softmax_rows_are_nonnegative_and_sum_to_one() {
        let mut prng = crate::prng::Prng::new(2);
        let x = prng.normal_tensor::<f64>(&[4, 7], 3.0).unwrap();
        let y = x.softmax(1).unwrap();
        for row in y.data().chunks_exact(7) {
            assert!(row.iter().all(|&p| p >= 0.0));
            let s: f64 = row.iter().sum();
            assert!(close(s, 1.0, 1e-12));
        }
        // Softmax along a non-trailing axis also normalizes.
        let z = x.softmax(0).unwrap();
        for c in 0..7 {
            let s: f64 = (0..4).map(|r| z.get(&[r, c])).sum();
            assert!(close(s, 1.0, 1e-12));
        }
    }

    #[test]
    fn softmax_handles_large_inputs_without_overflow() {
        let x = Tensor::<f32>::new(vec![1, 3], vec![1e4, 1e4 - 1.0, 0.0]).unwrap();
        let y = x.softmax(1).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn attention_fully_masked_row_is_an_error() {
        let q = vec![1.0f64; 2 * 3];
        let k = vec![1.0f64; 2 * 3];
        let v = vec![1.0f64; 2 * 3];
        let mask = AttnMask::from_blocked(2, 2, vec![false, true, true, true]).unwrap();
        let err = attn_single(&q, 2, &k, 2, &v, 3, 1.0, Some(&mask)).unwrap_err();
        match err {
            Error::FullyMasked { row } => assert_eq!(row, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn causal_mask_matches_definition() {
        let m = AttnMask::causal(2, 5, 3);
        // Query 0 is absolute position 3: keys 0..=3 visible.
        assert!(!m.is_blocked(0, 3));
        assert!(m.is_blocked(0, 4));
        // Query 1 is absolute position 4: everything visible.
        assert!(!m.is_blocked(1, 4));
    }

    #[test]
    fn rope_is_norm_preserving_and_invertible() {
        let mut prng = crate::prng::Prng::new(17);
        let t = prng.normal_tensor::<f64>(&[3, 2, 8], 1.0).unwrap();
        let mut rotated = t.data().to_vec();
        rope_rows(&mut rotated, 3, 2, 8, 5, 10_000.0, false);
        let n0: f64 = t.data().iter().map(|x| x * x).sum();
        let n1: f64 = rotated.iter().map(|x| x * x).sum();
        assert!(close(n0, n1, 1e-9));
        rope_rows(&mut rotated, 3, 2, 8, 5, 10_000.0, true);
        for (a, b) in rotated.iter().zip(t.data()) {
            assert!(close(*a, *b, 1e-9));
        }
        // Position 0 with offset 0 is the identity rotation.
        let mut row0 = t.data()[..16].to_vec();
        rope_rows(&mut row0, 1, 2, 8, 0, 10_000.0, false);
        assert_eq!(&row0[..], &t.data()[..16]);
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        let x = Tensor::<f32>::new(vec![2, 4], vec![0.5, 2.0, 2.0, 1.0, -1.0, -1.0, -1.0, -1.0])
            .unwrap();
        assert_eq!(x.argmax_last().unwrap(), vec![1, 0]);
    }

    #[test]
    fn slice_index_concat_round_trip() {
        let x = Tensor::<f64>::new(vec![2, 3, 2], (0..12).map(|i| i as f64).collect()).unwrap();
        let a = x.slice_axis(1, 0, 1).unwrap();
        let b = x.slice_axis(1, 1, 2).unwrap();
        let back = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(back, x);
        let mid = x.index_axis(1, 1).unwrap();
        assert_eq!(mid.shape(), &[2, 2]);
        assert_eq!(mid.data(), &[2.0, 3.0, 8.0, 9.0]);
    }

    #[test]
    fn permute_transposes() {
        let x = Tensor::<f64>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = x.permute(&[1, 0]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = t.permute(&[1, 0]).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn reduce_to_shape_inverts_broadcast() {
        let g = Tensor::<f64>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = g.reduce_to_shape(&[3]).unwrap();
        assert_eq!(r.data(), &[5.0, 7.0, 9.0]);
        let r2 = g.reduce_to_shape(&[2, 1]).unwrap();
        assert_eq!(r2.data(), &[6.0, 15.0]);
        let r3 = g.reduce_to_shape(&[]).unwrap();
        assert_eq!(r3.data(), &[21.0]);
    }

    #[test]
    fn cross_entropy_ignores_marked_rows() {
        let logits = Tensor::<f64>::new(vec![3, 2], vec![0.0, 0.0, 5.0, 0.0, 0.0, 5.0]).unwrap();
        let ignore = usize::MAX;
        let (loss, count) =
            cross_entropy_rows(logits.data(), 3, 2, &[0, ignore, 1], ignore).unwrap();
        assert_eq!(count, 2);
        // Row 0: ln 2; row 2: -ln(sigmoid-ish) = ln(1 + e^-5).
        let expect = (2.0f64.ln() + (1.0 + (-5.0f64).exp()).ln()) / 2.0;
        assert!(close(loss, expect, 1e-12));
        assert!(cross_entropy_rows(logits.data(), 3, 2, &[ignore; 3], ignore).is_err());
    }
}
