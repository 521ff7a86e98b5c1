//! Numeric checks linking embedding staleness, distribution distance and
//! risk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::MlpNet;
use crate::numkernel::{self, EmbeddingMatrix, Rng};
use crate::synth::SynthTask;

/// Slack tolerance for a bound to count as satisfied.
pub const BOUND_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckRecord {
    pub seed: Option<u64>,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`.
    pub slack: f64,
    pub pass: bool,
}

impl BoundCheckRecord {
    pub fn new(seed: Option<u64>, lhs: f64, rhs: f64) -> Self {
        let slack = rhs - lhs;
        Self {
            seed,
            lhs,
            rhs,
            slack,
            pass: slack >= -BOUND_TOLERANCE,
        }
    }
}

/// `TV(softmax(beta a), softmax(beta b)) <= ½ ||beta a - beta b||_1`.
pub fn check_softmax_tv_bound(a: &[f64], b: &[f64], beta: f64) -> Result<BoundCheckRecord> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("logits of length {} and {}", a.len(), b.len())));
    }
    let pa = numkernel::softmax(a, beta)?;
    let pb = numkernel::softmax(b, beta)?;
    let lhs = numkernel::tv_distance(&pa, &pb)?;
    let rhs = 0.5 * a.iter().zip(b).map(|(x, y)| (beta * x - beta * y).abs()).sum::<f64>();
    Ok(BoundCheckRecord::new(None, lhs, rhs))
}

/// Random instances of [`check_softmax_tv_bound`]: lengths 2..=64, logits
/// with random scale, `beta` log-uniform on `[0.01, 100]`.
pub fn softmax_tv_sweep(instances: usize, seed: u64) -> Result<Vec<BoundCheckRecord>> {
    let root = Rng::new(seed);
    (0..instances as u64)
        .map(|i| {
            let mut rng = root.derive(i);
            let n = 2 + rng.below(63);
            let scale = (rng.uniform() * 6.0 - 3.0).exp();
            let a: Vec<f64> = (0..n).map(|_| scale * rng.normal()).collect();
            let b: Vec<f64> = if rng.uniform() < 0.5 {
                a.iter().map(|v| v + 0.1 * scale * rng.normal()).collect()
            } else {
                (0..n).map(|_| scale * rng.normal()).collect()
            };
            let beta = 10f64.powf(rng.uniform() * 4.0 - 2.0);
            let mut rec = check_softmax_tv_bound(&a, &b, beta)?;
            rec.seed = Some(i);
            Ok(rec)
        })
        .collect()
}

/// Per-target loss before the `1 - exp(-l)` transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundedLoss {
    /// `||h(g'(y)) - g(y)||²`.
    Mse,
    /// `-log P_h(y | x)`.
    CePointwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskGapReport {
    /// Mean over probes of `E_{y~P} phi(y)`.
    pub risk_true: f64,
    /// Mean over probes of `E_{y~P_h} phi(y)`.
    pub risk_stale: f64,
    /// Mean over probes of the absolute risk gap.
    pub gap: f64,
    /// Mean over probes of `TV(P, P_h)`.
    pub tv: f64,
    /// Per probe: `lhs = |gap|`, `rhs = TV`.
    pub per_probe: Vec<BoundCheckRecord>,
}

impl RiskGapReport {
    pub fn all_pass(&self) -> bool {
        self.per_probe.iter().all(|r| r.pass)
    }
}

/// Exact-summation risk gap between the true distribution and the one
/// induced by the (optionally corrected) stale table. The loss is mapped to
/// `[0, 1)` by `1 - exp(-l)`, so each gap is bounded by the TV distance.
pub fn check_risk_gap(
    task: &SynthTask,
    corrector: Option<&MlpNet>,
    loss: BoundedLoss,
    n_probes: usize,
) -> Result<RiskGapReport> {
    let beta = task.config.beta;
    let approx = match corrector {
        Some(h) => h.predict(&task.stale)?,
        None => task.stale.clone(),
    };
    let m = n_probes.min(task.queries.rows());
    if m == 0 {
        return Err(Error::Empty("probe queries"));
    }
    let mse: Vec<f64> = approx
        .iter_rows()
        .zip(task.truth.iter_rows())
        .map(|(a, g)| a.iter().zip(g).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect();
    let mut per_probe = Vec::with_capacity(m);
    let (mut rt, mut rs, mut gap, mut tv) = (0.0, 0.0, 0.0, 0.0);
    for (i, x) in task.queries.iter_rows().take(m).enumerate() {
        let p = numkernel::softmax(&numkernel::scores_for(x, &task.truth)?, beta)?;
        let sq = numkernel::scores_for(x, &approx)?;
        let q = numkernel::softmax(&sq, beta)?;
        let phi: Vec<f64> = match loss {
            BoundedLoss::Mse => mse.iter().map(|l| 1.0 - (-l).exp()).collect(),
            // 1 - exp(log P_h) = 1 - P_h
            BoundedLoss::CePointwise => q.iter().map(|p| 1.0 - p).collect(),
        };
        let r_true: f64 = p.iter().zip(&phi).map(|(a, b)| a * b).sum();
        let r_stale: f64 = q.iter().zip(&phi).map(|(a, b)| a * b).sum();
        let d = numkernel::tv_distance(&p, &q)?;
        let g = (r_true - r_stale).abs();
        per_probe.push(BoundCheckRecord::new(Some(i as u64), g, d));
        rt += r_true;
        rs += r_stale;
        gap += g;
        tv += d;
    }
    let mf = m as f64;
    Ok(RiskGapReport {
        risk_true: rt / mf,
        risk_stale: rs / mf,
        gap: gap / mf,
        tv: tv / mf,
        per_probe,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub norm: f64,
    /// Mean over targets of `||g(y) - g_u(y)||_1`.
    pub l1_gap: f64,
    /// Mean over probes of the TV distance between the two softmaxes.
    pub tv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSweep {
    pub rows: Vec<PerturbationRow>,
    /// `max l1_gap / norm` over nonzero norms.
    pub lipschitz_estimate: f64,
    /// Least-squares slope of TV against norm through the origin.
    pub tv_slope: f64,
}

/// Perturbs the parameters of `g` along one random unit direction by each
/// norm and measures the embedding and distribution gaps.
pub fn staleness_perturbation_sweep(
    g: &MlpNet,
    norms: &[f64],
    targets_raw: &EmbeddingMatrix,
    probes: &EmbeddingMatrix,
    beta: f64,
    seed: u64,
) -> Result<PerturbationSweep> {
    if norms.iter().any(|n| !(n.is_finite() && *n >= 0.0)) {
        return Err(Error::invalid("perturbation norms must be finite and non-negative"));
    }
    if probes.rows() == 0 || targets_raw.rows() == 0 {
        return Err(Error::Empty("probes or targets"));
    }
    let base = g.flat_params();
    let mut rng = Rng::new(seed);
    let mut dir: Vec<f64> = base.iter().map(|_| rng.normal()).collect();
    let len = numkernel::dot(&dir, &dir).sqrt();
    dir.iter_mut().for_each(|v| *v /= len);

    let fresh = g.predict(targets_raw)?;
    let p_fresh: Vec<Vec<f64>> = probes
        .iter_rows()
        .map(|x| numkernel::softmax(&numkernel::scores_for(x, &fresh)?, beta))
        .collect::<Result<_>>()?;
    let mut moved = g.clone();
    let mut rows = Vec::with_capacity(norms.len());
    for &norm in norms {
        let params: Vec<f64> = base.iter().zip(&dir).map(|(p, d)| p + norm * d).collect();
        moved.set_flat_params(&params)?;
        let out = moved.predict(targets_raw)?;
        let l1_gap = fresh
            .iter_rows()
            .zip(out.iter_rows())
            .map(|(a, b)| numkernel::l1_distance(a, b))
            .sum::<f64>()
            / fresh.rows() as f64;
        let mut tv = 0.0;
        for (x, p) in probes.iter_rows().zip(&p_fresh) {
            let q = numkernel::softmax(&numkernel::scores_for(x, &out)?, beta)?;
            tv += numkernel::tv_distance(p, &q)?;
        }
        rows.push(PerturbationRow {
            norm,
            l1_gap,
            tv: tv / probes.rows() as f64,
        });
    }
    let lipschitz_estimate = rows
        .iter()
        .filter(|r| r.norm > 0.0)
        .map(|r| r.l1_gap / r.norm)
        .fold(0.0, f64::max);
    let sxx: f64 = rows.iter().map(|r| r.norm * r.norm).sum();
    let sxy: f64 = rows.iter().map(|r| r.norm * r.tv).sum();
    let tv_slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Ok(PerturbationSweep {
        rows,
        lipschitz_estimate,
        tv_slope,
    })
}

/// Coefficient of variation (population standard deviation over mean).
pub fn coefficient_of_variation(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return None;
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(var.sqrt() / mean.abs())
}
