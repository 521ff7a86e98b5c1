//! Deterministic dense numeric primitives.
//!
//! Every reduction accumulates in ascending index order so results are
//! bit-reproducible regardless of how callers batch their work.

mod matrix;
mod rng;

pub use matrix::{EmbeddingMatrix, MATRIX_MAGIC};
pub use rng::{Rng, UNIFORM_HI, UNIFORM_LO};

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Tolerance used when checking that an input vector is a distribution.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Inner product with ascending-index accumulation.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Scores every input row against every target row: `out[i][j] = <inputs_i, targets_j>`.
pub fn matmul_scores(inputs: &EmbeddingMatrix, targets: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if inputs.dim() != targets.dim() {
        return Err(Error::shape(format!(
            "inputs are {}x{} but targets are {}x{}",
            inputs.rows(),
            inputs.dim(),
            targets.rows(),
            targets.dim()
        )));
    }
    let n = targets.rows();
    let mut out = Vec::with_capacity(inputs.rows() * n);
    for x in inputs.iter_rows() {
        out.extend(targets.iter_rows().map(|t| dot(x, t)));
    }
    if inputs.dim() == 0 {
        out = vec![0.0; inputs.rows() * n];
    }
    EmbeddingMatrix::new(inputs.rows(), n, out)
}

/// Scores of one query vector against every target row.
pub fn scores_for(query: &[f64], targets: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if query.len() != targets.dim() {
        return Err(Error::shape(format!(
            "query of dim {} against targets of dim {}",
            query.len(),
            targets.dim()
        )));
    }
    Ok(targets.iter_rows().map(|t| dot(query, t)).collect())
}

fn check_logits(logits: &[f64], beta: f64) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {i}")));
    }
    Ok(())
}

/// `ln Σ exp(beta * logits)`, max-shifted.
pub fn log_sum_exp(logits: &[f64], beta: f64) -> Result<f64> {
    check_logits(logits, beta)?;
    Ok(lse_unchecked(logits, beta))
}

fn lse_unchecked(logits: &[f64], beta: f64) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(beta * v));
    let mut sum = 0.0;
    for &v in logits {
        sum += (beta * v - max).exp();
    }
    max + sum.ln()
}

/// Log-probabilities of `softmax(beta * logits)`.
pub fn log_softmax(logits: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_logits(logits, beta)?;
    let lse = lse_unchecked(logits, beta);
    Ok(logits.iter().map(|&v| beta * v - lse).collect())
}

/// `softmax(beta * logits)`; sums to one within 1e-12.
pub fn softmax(logits: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_logits(logits, beta)?;
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(beta * v));
    let mut out: Vec<f64> = logits.iter().map(|&v| (beta * v - max).exp()).collect();
    let mut z = 0.0;
    for &e in &out {
        z += e;
    }
    for e in &mut out {
        *e /= z;
    }
    Ok(out)
}

/// Orders `(score, index)` pairs by descending score then ascending index.
#[inline]
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    let by_score = if scores[a] == scores[b] {
        // -0.0 and 0.0 are the same score
        Ordering::Equal
    } else {
        scores[b].total_cmp(&scores[a])
    };
    by_score.then(a.cmp(&b))
}

/// Indices of the `min(k, N)` largest scores, sorted by (score desc, index asc).
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("top_k with k = 0"));
    }
    let k = k.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k == 0 {
        return Ok(idx);
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    Ok(idx)
}

/// Draws `k` distinct indices by perturbing `beta * logits` with standard
/// Gumbel noise and keeping the top-k. With `k = 1` the draw is distributed
/// as `softmax(beta * logits)`.
pub fn gumbel_max_sample(logits: &[f64], beta: f64, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    check_logits(logits, beta)?;
    if k > logits.len() {
        return Err(Error::invalid(format!(
            "cannot draw {k} of {} without replacement",
            logits.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let perturbed: Vec<f64> = logits.iter().map(|&v| beta * v + rng.gumbel()).collect();
    top_k(&perturbed, k)
}

/// Single draw from a normalized categorical distribution by inverse CDF.
pub fn categorical_sample(probs: &[f64], rng: &mut Rng) -> Result<usize> {
    check_distribution(probs, "probs")?;
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // Rounding left u above the final partial sum: fall back to the last
    // index carrying mass.
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1))
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Empty("distribution"));
    }
    let mut s = 0.0;
    for (i, &v) in p.iter().enumerate() {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid(format!("{name}[{i}] = {v} is not a probability")));
        }
        s += v;
    }
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::invalid(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::shape(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")
}

/// `KL(p || q) = Σ p_i ln(p_i / q_i)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::Support { index: i, p: pi });
        }
        acc += pi * (pi / qi).ln();
    }
    Ok(acc.max(0.0))
}

/// KL divergence between two distributions given as log-probabilities.
/// Avoids the underflow that makes `kl_divergence` reject sharply peaked
/// softmax outputs.
pub fn kl_from_log_probs(log_p: &[f64], log_q: &[f64]) -> Result<f64> {
    if log_p.len() != log_q.len() {
        return Err(Error::shape(format!(
            "log-distributions of length {} and {}",
            log_p.len(),
            log_q.len()
        )));
    }
    let mut acc = 0.0;
    for (&lp, &lq) in log_p.iter().zip(log_q) {
        let p = lp.exp();
        if p == 0.0 {
            continue;
        }
        acc += p * (lp - lq);
    }
    Ok(acc.max(0.0))
}

/// Total variation `½ Σ |p_i - q_i|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(0.5 * l1_distance(p, q))
}

/// `Σ |a_i - b_i|`, ascending order.
pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += (x - y).abs();
    }
    acc
}

/// Index of the largest value, smallest index on ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    (0..values.len()).min_by(|&a, &b| rank_order(values, a, b))
}

/// Median of a non-empty slice (mean of the two middle values for even length).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Linear-interpolated quantile, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[cfg(test)]
mod tests;
