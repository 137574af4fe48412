//! Finite-difference gradient checking.
//!
//! Every backward rule in [`crate::graph`] is audited here against a
//! central-difference oracle in double precision. The same oracle is
//! reused by the integration suite to check the gradient of the full
//! draft-model loss with respect to each trainable parameter.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::prng::Prng;
use crate::tensor::{AttnMask, Tensor};

/// Central-difference gradient of a scalar function of `x`.
///
/// Element `i` is `(f(x + h e_i) - f(x - h e_i)) / 2h`. Runs in double
/// precision; `f` is re-evaluated `2 * numel` times.
pub fn finite_diff_grad<F>(x: &Tensor<f64>, mut f: F, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut grad = vec![0.0f64; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Largest elementwise relative error between two gradients, using
/// `|a - n| / max(1, |a|, |n|)` so tiny entries are compared absolutely.
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Result of auditing one op's backward rule.
#[derive(Clone, Debug)]
pub struct OpGradCheck {
    pub op: &'static str,
    pub max_err: f64,
}

/// Audits the backward rule of every differentiable op against the
/// central-difference oracle on small random instances. Returns one
/// entry per op with the worst relative error across all of that op's
/// differentiable inputs.
pub fn check_all_ops(seed: u64, h: f64) -> Result<Vec<OpGradCheck>> {
    let mut results = Vec::new();
    let mut audit = |name: &'static str,
                     inputs: Vec<Tensor<f64>>,
                     build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>|
     -> Result<()> {
        let err = audit_case(seed, &inputs, build, h)?;
        results.push(OpGradCheck { op: name, max_err: err });
        Ok(())
    };

    let mut p = Prng::new(seed);
    let t = |p: &mut Prng, shape: &[usize]| p.normal_tensor::<f64>(shape, 1.0).unwrap();

    let (a, b) = (t(&mut p, &[2, 3]), t(&mut p, &[2, 3]));
    audit("add", vec![a, b], &|g, v| g.add(v[0], v[1]))?;
    let (a, b) = (t(&mut p, &[2, 3]), t(&mut p, &[3]));
    audit("add_broadcast", vec![a, b], &|g, v| g.add(v[0], v[1]))?;
    let (a, b) = (t(&mut p, &[2, 3]), t(&mut p, &[2, 3]));
    audit("mul", vec![a, b], &|g, v| g.mul(v[0], v[1]))?;
    let (a, b) = (t(&mut p, &[2, 3]), t(&mut p, &[2, 1]));
    audit("mul_broadcast", vec![a, b], &|g, v| g.mul(v[0], v[1]))?;
    let a = t(&mut p, &[2, 3]);
    audit("scale", vec![a], &|g, v| g.scale(v[0], -1.75))?;
    let (a, b) = (t(&mut p, &[2, 3, 4]), t(&mut p, &[2, 4, 2]));
    audit("matmul", vec![a, b], &|g, v| g.matmul(v[0], v[1]))?;
    let (a, b) = (t(&mut p, &[2, 3, 4]), t(&mut p, &[4, 2]));
    audit("matmul_broadcast", vec![a, b], &|g, v| g.matmul(v[0], v[1]))?;
    let a = t(&mut p, &[2, 6]);
    audit("reshape", vec![a], &|g, v| g.reshape(v[0], vec![3, 4]))?;
    let a = t(&mut p, &[2, 3, 4]);
    audit("permute", vec![a], &|g, v| g.permute(v[0], &[2, 0, 1]))?;
    let (a, b) = (t(&mut p, &[2, 2]), t(&mut p, &[2, 3]));
    audit("concat", vec![a, b], &|g, v| g.concat(&[v[0], v[1]], 1))?;
    let table = t(&mut p, &[5, 3]);
    audit("gather", vec![table], &|g, v| g.gather(v[0], &[4, 0, 2, 0]))?;
    let (x, s) = (t(&mut p, &[3, 4]), t(&mut p, &[4]));
    audit("rms_norm", vec![x, s], &|g, v| g.rms_norm(v[0], v[1], 1e-5))?;
    let (x, s) = (t(&mut p, &[3, 8]), t(&mut p, &[2, 4]));
    audit("grouped_rms_norm", vec![x, s], &|g, v| {
        g.grouped_rms_norm(v[0], v[1], 2, 1e-5)
    })?;
    let x = t(&mut p, &[2, 5]);
    audit("silu", vec![x], &|g, v| g.silu(v[0]))?;
    let x = t(&mut p, &[2, 3, 2]);
    audit("softmax", vec![x], &|g, v| g.softmax(v[0], 1))?;
    let (q, k, v_) = (t(&mut p, &[2, 3, 4]), t(&mut p, &[2, 5, 4]), t(&mut p, &[2, 5, 4]));
    audit("attention", vec![q, k, v_], &|g, v| {
        g.scaled_dot_attention(v[0], v[1], v[2], None)
    })?;
    let (q, k, v_) = (t(&mut p, &[2, 4, 4]), t(&mut p, &[2, 6, 4]), t(&mut p, &[2, 6, 4]));
    audit("attention_masked", vec![q, k, v_], &|g, v| {
        g.scaled_dot_attention(v[0], v[1], v[2], Some(AttnMask::causal(4, 6, 2)))
    })?;
    let x = t(&mut p, &[2, 3, 2, 4]);
    audit("rope", vec![x], &|g, v| g.rope(v[0], 7, 10000.0))?;
    let logits = t(&mut p, &[4, 5]);
    audit("cross_entropy", vec![logits], &|g, v| {
        g.cross_entropy(v[0], &[1, usize::MAX, 3, 0], usize::MAX)
    })?;
    let x = t(&mut p, &[2, 3]);
    audit("sum", vec![x], &|g, v| g.sum(v[0]))?;
    let (x, wg, wu, wd) = (
        t(&mut p, &[2, 3]),
        t(&mut p, &[3, 8]),
        t(&mut p, &[3, 8]),
        t(&mut p, &[8, 3]),
    );
    audit("swiglu", vec![x, wg, wu, wd], &|g, v| {
        g.swiglu(v[0], v[1], v[2], v[3])
    })?;

    Ok(results)
}

/// Checks the backward of one built expression against finite
/// differences, probing the (possibly non-scalar) output through a
/// fixed random projection. Returns the worst relative error across
/// all inputs.
fn audit_case(
    seed: u64,
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    h: f64,
) -> Result<f64> {
    // One forward to learn the output shape, then freeze the probe.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = build(&mut g, &vars)?;
    let probe = Prng::new(seed ^ 0x9e3779b97f4a7c15)
        .normal_tensor::<f64>(g.value(y).shape(), 1.0)?;

    let loss_of = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let y = build(&mut g, &vars)?;
        let w = g.constant(probe.clone());
        let prod = g.mul(y, w)?;
        let loss = g.sum(prod)?;
        Ok(g.value(loss).data()[0])
    };

    let pv = g.constant(probe.clone());
    let prod = g.mul(y, pv)?;
    let loss = g.sum(prod)?;
    g.backward(loss)?;

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[i])
            .expect("all audit inputs require grad")
            .clone();
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let numeric = finite_diff_grad(input, |x| {
            work[i] = x.clone();
            loss_of(&work)
        }, h)?;
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

/// Audits the full draft-model loss: backpropagated gradients of every
/// draft parameter on a tiny double-precision instance are compared
/// against central differences of the loss itself. Returns the worst
/// relative error over all parameter elements.
pub fn check_draft_loss(seed: u64, h: f64) -> Result<f64> {
    use crate::baselm::{BaseLM, BaseLMConfig};
    use crate::specformer::{SpecFormer, SpecFormerConfig};
    use crate::training::{draft_loss, draft_loss_backward};

    let base = BaseLM::<f64>::init(
        BaseLMConfig {
            layers: 4,
            d_h: 4,
            n_heads: 2,
            d_ff: 8,
            vocab: 6,
            max_seq: 16,
            rope_base: 10000.0,
            eps: 1e-6,
        },
        seed ^ 0xb5ad_4ece_da1c_e2a9,
    )?;
    let mut sf = SpecFormer::<f64>::init(
        SpecFormerConfig {
            d_h: 4,
            l_d: 2,
            n_heads: 2,
            d_ff: 8,
            eps: 1e-6,
            rope_base: 10000.0,
        },
        seed,
    )?;
    let mut prng = Prng::new(seed ^ 0x94d0_49bb_1331_11eb);
    let batch: Vec<Vec<usize>> = (0..2)
        .map(|_| (0..5).map(|_| prng.below(6)).collect())
        .collect();

    for p in sf.params_mut() {
        p.zero_grad();
    }
    draft_loss_backward(&base, &mut sf, &batch)?;
    let analytic: Vec<Tensor<f64>> = sf.params_mut().iter().map(|p| p.grad().clone()).collect();

    let mut worst = 0.0f64;
    let n_params = analytic.len();
    for pi in 0..n_params {
        let start = sf.params_mut()[pi].value().clone();
        let numeric = finite_diff_grad(
            &start,
            |probe| {
                sf.params_mut()[pi].set_value(probe.clone())?;
                draft_loss(&base, &sf, &batch)
            },
            h,
        )?;
        sf.params_mut()[pi].set_value(start)?;
        worst = worst.max(max_rel_err(&analytic[pi], &numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_recovers_known_derivative() {
        // f(x) = sum(x^2): df/dx_i = 2 x_i.
        let x = Tensor::new(vec![3], vec![1.0, -0.5, 2.0]).unwrap();
        let g = finite_diff_grad(
            &x,
            |t| Ok(t.data().iter().map(|&v| v * v).sum()),
            1e-5,
        )
        .unwrap();
        let expect = [2.0, -1.0, 4.0];
        for (a, b) in g.data().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn max_rel_err_uses_absolute_scale_for_tiny_entries() {
        let a = Tensor::new(vec![2], vec![0.0, 100.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1e-9, 101.0]).unwrap();
        let err = max_rel_err(&a, &b);
        // 1e-9 absolute on the first entry, ~1e-2 relative on the second.
        assert!((err - 1.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn every_op_backward_matches_finite_differences() {
        let report = check_all_ops(5, 1e-5).unwrap();
        assert_eq!(report.len(), 21);
        for entry in &report {
            assert!(
                entry.max_err <= 1e-6,
                "op {} exceeded tolerance: {}",
                entry.op,
                entry.max_err
            );
        }
    }
}
