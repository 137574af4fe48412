//! Arithmetic-intensity analytics and the roofline throughput model.
//!
//! Pure closed forms, all in `f64`:
//!
//! - `AI_m = 2M / (bytes·M)` — FLOPs per byte a weight-bound decode
//!   step performs (2 FLOPs per parameter, each read once).
//! - `AI_c = peak_flops / bandwidth` — FLOPs per byte the chip can
//!   sustain at the roofline ridge.
//! - `rho = AI_c / AI_m` — redundancy: how many tokens' worth of
//!   compute one weight pass could amortize.
//! - `p = 1 + (m_s + l_d·m_p)/M` — relative parameter overhead of
//!   attaching a draft model.
//! - `r1 = (a/p)·AI_m`, `r2 = k`, feasible iff `k ≤ rho/bs` — the
//!   achieved on-chip intensity gain and the draft budget it needs.
//! - `kappa = a·l_d/k`, `theta = kappa/(tps_sd/tps_base)` — budget-
//!   normalized acceptance and its ratio to the realized speedup (so
//!   `kappa/theta` IS the realized speedup, by construction).
//! - `roofline_throughput` — tokens/s under
//!   `time = max(compute, memory)`; linear in tokens in flight until
//!   the crossover at exactly `rho`, then flat.

use crate::error::{Error, Result};
use std::path::Path;

/// Chip capabilities entering the roofline model.
#[derive(Clone, Debug, PartialEq)]
pub struct ChipSpec {
    pub name: String,
    /// Peak half-precision throughput, FLOP/s.
    pub peak_flops: f64,
    /// Memory bandwidth, bytes/s.
    pub bandwidth: f64,
}

impl ChipSpec {
    pub fn new(name: impl Into<String>, peak_flops: f64, bandwidth: f64) -> Result<Self> {
        let spec = ChipSpec {
            name: name.into(),
            peak_flops,
            bandwidth,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The one shipped chip: NVIDIA A100 80G (311.84 TFLOP/s bf16,
    /// 2.04 TB/s).
    pub fn a100_80g() -> Self {
        ChipSpec {
            name: "A100-80G".into(),
            peak_flops: 311.84e12,
            bandwidth: 2.04e12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_flops > 0.0) || !self.peak_flops.is_finite() {
            return Err(Error::ChipSpec(format!(
                "peak_flops_bf16 must be positive and finite, got {}",
                self.peak_flops
            )));
        }
        if !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err(Error::ChipSpec(format!(
                "mem_bandwidth must be positive and finite, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }

    /// Parses a `key = value` text file with keys `name`,
    /// `peak_flops_bf16` (FLOP/s) and `mem_bandwidth` (bytes/s);
    /// decimal or scientific notation, `#` comments and blank lines
    /// allowed.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut name: Option<String> = None;
        let mut peak: Option<f64> = None;
        let mut bw: Option<f64> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::ChipSpec(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let number = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| Error::ChipSpec(format!("line {}: bad number `{v}`", lineno + 1)))
            };
            match key {
                "name" => name = Some(value.to_string()),
                "peak_flops_bf16" => peak = Some(number(value)?),
                "mem_bandwidth" => bw = Some(number(value)?),
                other => {
                    return Err(Error::ChipSpec(format!(
                        "line {}: unknown key `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        let require = |opt: Option<f64>, key: &str| -> Result<f64> {
            opt.ok_or_else(|| Error::ChipSpec(format!("missing key `{key}`")))
        };
        ChipSpec::new(
            name.ok_or_else(|| Error::ChipSpec("missing key `name`".into()))?,
            require(peak, "peak_flops_bf16")?,
            require(bw, "mem_bandwidth")?,
        )
    }
}

/// Everything the roofline feasibility analysis produces for one
/// (model, chip, drafter, batch) combination.
#[derive(Clone, Debug, PartialEq)]
pub struct RooflineReport {
    pub ai_m: f64,
    pub ai_c: f64,
    pub rho: f64,
    /// Parameter overhead factor, `>= 1`.
    pub p: f64,
    /// Achieved on-chip arithmetic intensity, `(a/p)·ai_m`.
    pub r1: f64,
    /// Draft-token budget the gain requires.
    pub r2: usize,
    /// Whether the budget fits the per-sequence redundancy `rho/bs`.
    pub feasible: bool,
    pub bs: usize,
}

impl RooflineReport {
    /// Composes the full analysis from raw counts.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        spec: &ChipSpec,
        m: f64,
        bytes_per_param: f64,
        m_s: f64,
        m_p: f64,
        l_d: usize,
        a: f64,
        k: usize,
        bs: usize,
    ) -> Result<Self> {
        if bs == 0 {
            return Err(Error::InvalidParam {
                name: "bs",
                detail: "batch size must be >= 1".into(),
            });
        }
        let ai_m = ai_model(m, bytes_per_param)?;
        let ai_c = ai_chip(spec)?;
        let rho = redundancy(ai_c, ai_m)?;
        let p = overhead_factor(m, m_s, m_p, l_d)?;
        let (r1, r2, feasible) = gain_and_budget(a, p, ai_m, k, rho, bs);
        Ok(RooflineReport {
            ai_m,
            ai_c,
            rho,
            p,
            r1,
            r2,
            feasible,
            bs,
        })
    }
}

/// One speedup measurement normalized by its acceptance budget.
#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputRecord {
    pub kappa: f64,
    pub tps_sd: f64,
    pub tps_base: f64,
    /// `kappa / (tps_sd / tps_base)` — realized speedup equals
    /// `kappa / theta` by construction.
    pub theta: f64,
}

impl ThroughputRecord {
    pub fn new(kappa: f64, tps_sd: f64, tps_base: f64) -> Result<Self> {
        Ok(ThroughputRecord {
            kappa,
            tps_sd,
            tps_base,
            theta: theta(kappa, tps_sd, tps_base)?,
        })
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::InvalidParam {
            name,
            detail: format!("must be positive and finite, got {v}"),
        });
    }
    Ok(())
}

/// Arithmetic intensity of decoding a model of `m` parameters at
/// `bytes_per_param`: `2m / (bytes_per_param · m)` FLOP/byte — 1.0 at
/// two bytes per parameter.
pub fn ai_model(m: f64, bytes_per_param: f64) -> Result<f64> {
    positive("m", m)?;
    positive("bytes_per_param", bytes_per_param)?;
    Ok(2.0 * m / (bytes_per_param * m))
}

/// Chip arithmetic intensity at the roofline ridge:
/// `peak_flops / bandwidth`.
pub fn ai_chip(spec: &ChipSpec) -> Result<f64> {
    spec.validate()?;
    Ok(spec.peak_flops / spec.bandwidth)
}

/// Redundancy ratio `rho = ai_c / ai_m`; 1 is the ideal case where no
/// redundancy remains.
pub fn redundancy(ai_c: f64, ai_m: f64) -> Result<f64> {
    positive("ai_m", ai_m)?;
    if !(ai_c >= 0.0) || !ai_c.is_finite() {
        return Err(Error::InvalidParam {
            name: "ai_c",
            detail: format!("must be nonnegative and finite, got {ai_c}"),
        });
    }
    Ok(ai_c / ai_m)
}

/// Parameter overhead of a draft model with `m_s` shared and `m_p`
/// per-slot parameters over a base of `m`: `1 + (m_s + l_d·m_p)/m`.
/// Affine in `l_d` with slope `m_p/m`.
pub fn overhead_factor(m: f64, m_s: f64, m_p: f64, l_d: usize) -> Result<f64> {
    positive("m", m)?;
    for (name, v) in [("m_s", m_s), ("m_p", m_p)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::InvalidParam {
                name,
                detail: format!("must be nonnegative and finite, got {v}"),
            });
        }
    }
    Ok(1.0 + (m_s + l_d as f64 * m_p) / m)
}

/// On-chip intensity gain and the budget it needs:
/// `r1 = (a/p)·ai_m`, `r2 = k`, feasible iff `k <= rho/bs`.
/// Preconditions (`p >= 1`, `bs >= 1`) are the caller's contract.
pub fn gain_and_budget(
    a: f64,
    p: f64,
    ai_m: f64,
    k: usize,
    rho: f64,
    bs: usize,
) -> (f64, usize, bool) {
    debug_assert!(p >= 1.0 && bs >= 1);
    let r1 = (a / p) * ai_m;
    let feasible = k as f64 <= rho / bs as f64;
    (r1, k, feasible)
}

/// Budget-normalized acceptance `kappa = a·l_d/k`; `k >= 1`.
pub fn kappa(a: f64, l_d: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParam {
            name: "k",
            detail: "draft budget must be >= 1".into(),
        });
    }
    Ok(a * l_d as f64 / k as f64)
}

/// `theta = kappa / (tps_sd / tps_base)`: how much of the acceptance
/// gain the deployment failed to realize (1 means fully realized).
pub fn theta(kappa: f64, tps_sd: f64, tps_base: f64) -> Result<f64> {
    positive("tps_sd", tps_sd)?;
    positive("tps_base", tps_base)?;
    Ok(kappa / (tps_sd / tps_base))
}

/// Modeled decode throughput with `tokens_in_flight` tokens sharing
/// one weight pass: `time = max(2·m·tokens/peak, m·bytes/bandwidth)`,
/// returns `tokens/time`. Linear in tokens until the crossover at
/// exactly `rho`, then flat at `peak/(2m)`.
pub fn roofline_throughput(
    spec: &ChipSpec,
    m: f64,
    bytes_per_param: f64,
    tokens_in_flight: usize,
) -> Result<f64> {
    spec.validate()?;
    positive("m", m)?;
    positive("bytes_per_param", bytes_per_param)?;
    if tokens_in_flight == 0 {
        return Err(Error::InvalidParam {
            name: "tokens_in_flight",
            detail: "must be >= 1".into(),
        });
    }
    let tokens = tokens_in_flight as f64;
    let compute_time = 2.0 * m * tokens / spec.peak_flops;
    let memory_time = m * bytes_per_param / spec.bandwidth;
    if compute_time >= memory_time {
        // Compute-bound: tokens/compute_time simplifies to peak/(2m).
        // Dividing the rounded products back out would wobble by an ulp
        // from one batch size to the next, so return the closed form.
        Ok(spec.peak_flops / (2.0 * m))
    } else {
        Ok(tokens / memory_time)
    }
}
