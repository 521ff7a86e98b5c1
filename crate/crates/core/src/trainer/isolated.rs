use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{InitMode, MlpNet, MlpSpec};
use crate::numkernel::{EmbeddingMatrix, Rng};
use crate::optim::{adam_step, AdamState};
use crate::softmax_approx::{corrector_loss_ce, corrector_loss_mse, mean_full_kl, truncated_from_rows};
use crate::synth::SynthTask;

use super::{check_finite, CorrectorLossKind};

const STREAM_POOL: u64 = 11;
const STREAM_INIT: u64 = 12;
const STREAM_EPOCHS: u64 = 13;

/// Corrector-only training on a synthetic task.
///
/// A fixed pool of `ceil(fraction * N)` targets is drawn once. Each epoch
/// takes one Adam step on at most `target_batch` pool rows, scored against
/// `query_batch` fresh queries for the CE loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IsolatedConfig {
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub query_batch: usize,
    pub target_batch: usize,
    pub loss: CorrectorLossKind,
    pub seed: u64,
}

impl Default for IsolatedConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.03,
            patience: 100,
            max_epochs: 1000,
            query_batch: 128,
            target_batch: 512,
            loss: CorrectorLossKind::Ce,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IsolatedOutcome {
    pub corrector: MlpNet,
    pub epochs: usize,
    pub pool_size: usize,
    pub best_loss: f64,
    pub losses: Vec<f64>,
    /// Mean over probes of full-support `KL(P || P_h)`.
    pub kl_corrected: f64,
    /// Mean over probes of `KL(P || P_{g'})`.
    pub kl_stale: f64,
}

pub fn train_corrector_isolated(
    task: &SynthTask,
    spec: &MlpSpec,
    sample_fraction: f64,
    config: &IsolatedConfig,
) -> Result<IsolatedOutcome> {
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(Error::invalid(format!("sample fraction must be in (0, 1], got {sample_fraction}")));
    }
    if config.query_batch == 0 || config.target_batch == 0 {
        return Err(Error::invalid("batch sizes must be at least 1"));
    }
    let d = task.stale.dim();
    if spec.in_dim != d || spec.out_dim != d || !spec.residual {
        return Err(Error::shape(format!("corrector must be a residual {d} -> {d} map")));
    }
    let n = task.stale.rows();
    let beta = task.config.beta;
    let root = Rng::new(config.seed);

    let pool_size = ((sample_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut pool = root.derive(STREAM_POOL).sample_indices(n, pool_size);
    pool.sort_unstable();

    let mut h = MlpNet::init(spec.clone(), InitMode::ZeroResidual, &mut root.derive(STREAM_INIT))?;
    let mut adam = AdamState::new(config.learning_rate);
    let mut rng = root.derive(STREAM_EPOCHS);

    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut losses = Vec::new();
    for epoch in 0..config.max_epochs {
        let rows: Vec<usize> = if pool.len() <= config.target_batch {
            pool.clone()
        } else {
            let mut pick: Vec<usize> = rng
                .sample_indices(pool.len(), config.target_batch)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            pick.sort_unstable();
            pick
        };
        let stale_rows = task.stale.select_rows(&rows)?;
        let true_rows = task.truth.select_rows(&rows)?;
        let (corrected, cache) = h.forward(&stale_rows)?;
        let (loss, grad) = match config.loss {
            CorrectorLossKind::Mse => {
                let l = corrector_loss_mse(&true_rows, &corrected)?;
                (l.loss, l.grad_rows)
            }
            CorrectorLossKind::Ce => {
                let queries = task.sample_queries(config.query_batch, &mut rng);
                ce_batch(&queries, &rows, &true_rows, &corrected, beta)?
            }
        };
        check_finite(epoch, "isolated corrector loss", loss)?;
        h.backward(&cache, &grad)?;
        adam_step(&mut h, &mut adam)?;
        losses.push(loss);
        if loss < best {
            best = loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let corrected_all = h.predict(&task.stale)?;
    let kl_corrected = mean_full_kl(&task.queries, &task.truth, &corrected_all, beta)?;
    let kl_stale = task.staleness_kl;
    Ok(IsolatedOutcome {
        corrector: h,
        epochs: losses.len(),
        pool_size,
        best_loss: best,
        losses,
        kl_corrected,
        kl_stale,
    })
}

/// Mean over queries of `KL(P~ || P~_h)` on a shared subset, with the
/// gradient for each corrected row.
fn ce_batch(
    queries: &EmbeddingMatrix,
    subset: &[usize],
    true_rows: &EmbeddingMatrix,
    corrected: &EmbeddingMatrix,
    beta: f64,
) -> Result<(f64, EmbeddingMatrix)> {
    let m = queries.rows() as f64;
    let mut total = 0.0;
    let mut grad = EmbeddingMatrix::zeros(corrected.rows(), corrected.dim());
    for (i, q) in queries.iter_rows().enumerate() {
        let pt = truncated_from_rows(i, q, subset, true_rows, beta)?;
        let ph = truncated_from_rows(i, q, subset, corrected, beta)?;
        let l = corrector_loss_ce(&pt, &ph, q, corrected)?;
        total += l.loss;
        for r in 0..grad.rows() {
            let src = l.grad_rows.row(r);
            for (g, &s) in grad.row_mut(r).iter_mut().zip(src) {
                *g += s / m;
            }
        }
    }
    Ok((total / m, grad))
}
