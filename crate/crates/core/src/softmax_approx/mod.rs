//! Scorer-backed softmax distributions, subset selection and the losses
//! used to train encoders and correctors.
//!
//! Logits are raw inner products `s = <f(x), e(y)>`; every distribution is
//! `softmax(beta * s)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::MlpNet;
use crate::numkernel::{self, EmbeddingMatrix, Rng};

/// Where target embeddings come from.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a> {
    /// Fresh encoder applied to raw targets, `g(y)`.
    TrueEncoder {
        net: &'a MlpNet,
        targets_raw: &'a EmbeddingMatrix,
    },
    /// Precomputed fresh embeddings (synthetic tasks supply `g(y)` directly).
    TrueTable(&'a EmbeddingMatrix),
    /// Cached rows `B_y = g'(y)`.
    StaleBuffer(&'a EmbeddingMatrix),
    /// Corrector applied to cached rows, `h(B_y)`.
    Corrected {
        corrector: &'a MlpNet,
        buffer: &'a EmbeddingMatrix,
    },
}

impl<'a> Scorer<'a> {
    pub fn corrected(corrector: &'a MlpNet, buffer: &'a EmbeddingMatrix) -> Result<Self> {
        let d = buffer.dim();
        if corrector.in_dim() != d || corrector.out_dim() != d {
            return Err(Error::shape(format!(
                "corrector maps {} -> {} but buffer rows have dim {d}",
                corrector.in_dim(),
                corrector.out_dim()
            )));
        }
        Ok(Scorer::Corrected { corrector, buffer })
    }

    pub fn n_targets(&self) -> usize {
        match self {
            Scorer::TrueEncoder { targets_raw, .. } => targets_raw.rows(),
            Scorer::TrueTable(m) | Scorer::StaleBuffer(m) => m.rows(),
            Scorer::Corrected { buffer, .. } => buffer.rows(),
        }
    }

    /// Embeddings of every target.
    pub fn embed_all(&self) -> Result<EmbeddingMatrix> {
        match *self {
            Scorer::TrueEncoder { net, targets_raw } => net.predict(targets_raw),
            Scorer::TrueTable(m) | Scorer::StaleBuffer(m) => Ok(m.clone()),
            Scorer::Corrected { corrector, buffer } => corrector.predict(buffer),
        }
    }

    /// Embeddings of the listed targets, in the given order.
    pub fn embed_rows(&self, indices: &[usize]) -> Result<EmbeddingMatrix> {
        match *self {
            Scorer::TrueEncoder { net, targets_raw } => net.predict(&targets_raw.select_rows(indices)?),
            Scorer::TrueTable(m) | Scorer::StaleBuffer(m) => m.select_rows(indices),
            Scorer::Corrected { corrector, buffer } => corrector.predict(&buffer.select_rows(indices)?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetMode {
    TopK,
    Gumbel,
}

/// Softmax restricted to a subset of targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedDistribution {
    pub input_index: usize,
    /// Sorted, unique target indices.
    pub subset: Vec<usize>,
    /// Raw inner products, aligned with `subset`.
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub beta: f64,
}

impl TruncatedDistribution {
    /// Builds the distribution from logits already aligned with `subset`.
    pub fn from_logits(input_index: usize, subset: Vec<usize>, logits: Vec<f64>, beta: f64) -> Result<Self> {
        if subset.is_empty() {
            return Err(Error::Empty("subset"));
        }
        if subset.len() != logits.len() {
            return Err(Error::shape(format!(
                "{} logits for a subset of {}",
                logits.len(),
                subset.len()
            )));
        }
        check_sorted_unique(&subset)?;
        let probs = numkernel::softmax(&logits, beta)?;
        Ok(Self {
            input_index,
            subset,
            logits,
            probs,
            beta,
        })
    }

    pub fn len(&self) -> usize {
        self.subset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subset.is_empty()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        numkernel::log_softmax(&self.logits, self.beta).expect("logits validated at construction")
    }

    /// Position of target `y` within the subset.
    pub fn position(&self, y: usize) -> Option<usize> {
        self.subset.binary_search(&y).ok()
    }
}

fn check_sorted_unique(subset: &[usize]) -> Result<()> {
    if let Some(w) = subset.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "subset must be sorted and unique, found {} before {}",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Brute-force distribution over every target.
pub fn full_distribution(scorer: &Scorer<'_>, x: &[f64], beta: f64) -> Result<Vec<f64>> {
    if scorer.n_targets() == 0 {
        return Err(Error::Empty("target set"));
    }
    let emb = scorer.embed_all()?;
    numkernel::softmax(&numkernel::scores_for(x, &emb)?, beta)
}

/// Picks `S(Y)`: `k_hard` hard candidates from `scores`, `k_uniform`
/// uniform draws without replacement, and the label. Duplicates are merged
/// and not replaced, so the result may be smaller than the requested total.
pub fn select_from_scores(
    scores: &[f64],
    beta: f64,
    k_hard: usize,
    k_uniform: usize,
    mode: SubsetMode,
    label: Option<usize>,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let n = scores.len();
    if k_hard + k_uniform > n {
        return Err(Error::invalid(format!(
            "k_hard {k_hard} + k_uniform {k_uniform} exceeds {n} targets"
        )));
    }
    if let Some(y) = label {
        if y >= n {
            return Err(Error::OutOfRange { index: y, len: n });
        }
    }
    let mut out = Vec::with_capacity(k_hard + k_uniform + 1);
    if k_hard > 0 {
        match mode {
            SubsetMode::TopK => out.extend(numkernel::top_k(scores, k_hard)?),
            SubsetMode::Gumbel => out.extend(numkernel::gumbel_max_sample(scores, beta, k_hard, rng)?),
        }
    }
    out.extend(rng.sample_indices(n, k_uniform));
    out.extend(label);
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Subset selection scored by `scorer`.
#[allow(clippy::too_many_arguments)]
pub fn select_subset(
    scorer: &Scorer<'_>,
    x: &[f64],
    beta: f64,
    k_hard: usize,
    k_uniform: usize,
    mode: SubsetMode,
    label: Option<usize>,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let emb = scorer.embed_all()?;
    let scores = numkernel::scores_for(x, &emb)?;
    select_from_scores(&scores, beta, k_hard, k_uniform, mode, label, rng)
}

/// Softmax over `subset` only, with embeddings taken from `scorer`.
pub fn truncated_softmax(
    scorer: &Scorer<'_>,
    input_index: usize,
    x: &[f64],
    subset: &[usize],
    beta: f64,
) -> Result<TruncatedDistribution> {
    if subset.is_empty() {
        return Err(Error::Empty("subset"));
    }
    check_sorted_unique(subset)?;
    let rows = scorer.embed_rows(subset)?;
    truncated_from_rows(input_index, x, subset, &rows, beta)
}

/// Truncated softmax from embeddings already gathered for `subset`.
pub fn truncated_from_rows(
    input_index: usize,
    x: &[f64],
    subset: &[usize],
    rows: &EmbeddingMatrix,
    beta: f64,
) -> Result<TruncatedDistribution> {
    if rows.rows() != subset.len() {
        return Err(Error::shape(format!(
            "{} embedding rows for a subset of {}",
            rows.rows(),
            subset.len()
        )));
    }
    let logits = numkernel::scores_for(x, rows)?;
    TruncatedDistribution::from_logits(input_index, subset.to_vec(), logits, beta)
}

/// Loss value with gradients for the query vector and each subset row.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLoss {
    pub loss: f64,
    /// `dL/ds` per subset member.
    pub grad_logits: Vec<f64>,
    pub grad_query: Vec<f64>,
    /// `|S| x D`, aligned with the subset.
    pub grad_targets: EmbeddingMatrix,
}

/// Propagates logit gradients through `s_j = <x, t_j>`.
fn logit_backprop(grad_logits: &[f64], x: &[f64], rows: &EmbeddingMatrix) -> (Vec<f64>, EmbeddingMatrix) {
    let d = x.len();
    let mut gq = vec![0.0; d];
    let mut gt = Vec::with_capacity(rows.rows() * d);
    for (j, &gl) in grad_logits.iter().enumerate() {
        let t = rows.row(j);
        for (q, &tv) in gq.iter_mut().zip(t) {
            *q += gl * tv;
        }
        gt.extend(x.iter().map(|&xv| gl * xv));
    }
    (gq, EmbeddingMatrix::from_raw(rows.rows(), d, gt))
}

/// `-log P(label | x)` over the subset. `x` and `target_rows` are the
/// fresh embeddings that produced `dist.logits`.
pub fn task_loss_ce(
    dist: &TruncatedDistribution,
    label: usize,
    x: &[f64],
    target_rows: &EmbeddingMatrix,
) -> Result<TaskLoss> {
    let pos = dist
        .position(label)
        .ok_or_else(|| Error::invalid(format!("label {label} is not in the subset")))?;
    check_rows(dist, x, target_rows)?;
    let log_probs = dist.log_probs();
    let loss = -log_probs[pos];
    let mut grad_logits: Vec<f64> = dist.probs.iter().map(|p| dist.beta * p).collect();
    grad_logits[pos] -= dist.beta;
    let (grad_query, grad_targets) = logit_backprop(&grad_logits, x, target_rows);
    Ok(TaskLoss {
        loss,
        grad_logits,
        grad_query,
        grad_targets,
    })
}

fn check_rows(dist: &TruncatedDistribution, x: &[f64], rows: &EmbeddingMatrix) -> Result<()> {
    if rows.rows() != dist.len() || rows.dim() != x.len() {
        return Err(Error::shape(format!(
            "{}x{} rows and query of dim {} for a subset of {}",
            rows.rows(),
            rows.dim(),
            x.len(),
            dist.len()
        )));
    }
    Ok(())
}

/// Corrector loss with the gradient for each corrected row.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorLoss {
    pub loss: f64,
    pub grad_rows: EmbeddingMatrix,
}

/// Mean over rows of `||g_i - c_i||^2`. The squared norm keeps the gradient
/// smooth at the optimum.
pub fn corrector_loss_mse(g_rows: &EmbeddingMatrix, corrected_rows: &EmbeddingMatrix) -> Result<CorrectorLoss> {
    if g_rows.shape() != corrected_rows.shape() {
        return Err(Error::shape(format!(
            "target rows {}x{} vs corrected rows {}x{}",
            g_rows.rows(),
            g_rows.dim(),
            corrected_rows.rows(),
            corrected_rows.dim()
        )));
    }
    let n = g_rows.rows();
    if n == 0 {
        return Err(Error::Empty("corrector batch"));
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(g_rows.data().len());
    for (g, c) in g_rows.iter_rows().zip(corrected_rows.iter_rows()) {
        let mut sq = 0.0;
        for (&gv, &cv) in g.iter().zip(c) {
            let diff = cv - gv;
            sq += diff * diff;
            grad.push(2.0 * diff * scale);
        }
        loss += sq;
    }
    Ok(CorrectorLoss {
        loss: loss * scale,
        grad_rows: EmbeddingMatrix::from_raw(n, g_rows.dim(), grad),
    })
}

/// `KL(P || P_h)` over a shared subset; `p_true` is a constant. Gradients
/// flow only into `corrected_rows`, which produced `p_h.logits`.
pub fn corrector_loss_ce(
    p_true: &TruncatedDistribution,
    p_h: &TruncatedDistribution,
    x: &[f64],
    corrected_rows: &EmbeddingMatrix,
) -> Result<CorrectorLoss> {
    if p_true.subset != p_h.subset || p_true.input_index != p_h.input_index {
        return Err(Error::invalid("corrector CE needs identical subsets and inputs"));
    }
    check_rows(p_h, x, corrected_rows)?;
    let loss = numkernel::kl_from_log_probs(&p_true.log_probs(), &p_h.log_probs())?;
    let grad_logits: Vec<f64> = p_h
        .probs
        .iter()
        .zip(&p_true.probs)
        .map(|(ph, pt)| p_h.beta * (ph - pt))
        .collect();
    let (_, grad_rows) = logit_backprop(&grad_logits, x, corrected_rows);
    Ok(CorrectorLoss { loss, grad_rows })
}

/// Full-support `KL(P || Q)` for one query, from two embedding tables.
pub fn full_kl(x: &[f64], p_targets: &EmbeddingMatrix, q_targets: &EmbeddingMatrix, beta: f64) -> Result<f64> {
    let lp = numkernel::log_softmax(&numkernel::scores_for(x, p_targets)?, beta)?;
    let lq = numkernel::log_softmax(&numkernel::scores_for(x, q_targets)?, beta)?;
    numkernel::kl_from_log_probs(&lp, &lq)
}

/// Mean of [`full_kl`] over the rows of `queries`.
pub fn mean_full_kl(
    queries: &EmbeddingMatrix,
    p_targets: &EmbeddingMatrix,
    q_targets: &EmbeddingMatrix,
    beta: f64,
) -> Result<f64> {
    if queries.rows() == 0 {
        return Err(Error::Empty("probe queries"));
    }
    let mut acc = 0.0;
    for q in queries.iter_rows() {
        acc += full_kl(q, p_targets, q_targets, beta)?;
    }
    Ok(acc / queries.rows() as f64)
}
