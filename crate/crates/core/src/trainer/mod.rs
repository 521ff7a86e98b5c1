//! Training loops: isolated corrector warm-up, joint dual-encoder training
//! with a stale buffer, and the toy retrieval-augmented model.

mod isolated;
mod joint;
pub mod rlm;

pub use isolated::{train_corrector_isolated, IsolatedConfig, IsolatedOutcome};
pub use joint::{train_joint, JointModels, JointOutcome};
pub use rlm::{
    answer_accuracy, perplexity_distillation, reader_nll, train_rlm, ReaderNll, RlmArm, RlmConfig, RlmModels, RlmOutcome,
};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::MlpNet;
use crate::numkernel::{self, EmbeddingMatrix};
use crate::softmax_approx::SubsetMode;

pub const RECALL_KS: [usize; 5] = [1, 5, 10, 20, 100];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectorLossKind {
    Mse,
    Ce,
}

/// When the buffer is re-encoded during joint training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferPolicy {
    Never,
    /// Full refresh before every step `t > 0` with `t % R == 0`.
    EveryRSteps(usize),
}

impl BufferPolicy {
    pub fn refresh_due(&self, step: usize) -> bool {
        match *self {
            BufferPolicy::Never => false,
            BufferPolicy::EveryRSteps(r) => step > 0 && step % r == 0,
        }
    }
}

/// Which approximation picks the training subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Buffer rows as-is, never refreshed.
    Stale,
    /// Buffer rows, refreshed every `R` steps.
    Exhaustive,
    /// Corrector applied to a never-refreshed buffer.
    Corrector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub k_hard: usize,
    pub k_uniform: usize,
    pub uniform_negatives: bool,
    pub subset_mode: SubsetMode,
    pub beta: f64,
    pub corrector_loss: CorrectorLossKind,
    pub corrector_loss_weight: f64,
    pub buffer_policy: BufferPolicy,
    /// Whether subsets come from the corrector scorer.
    pub use_corrector: bool,
    pub encoder_lr: f64,
    pub corrector_lr: f64,
    pub seed: u64,
    /// Evaluate every this many steps (0 disables intermediate evals).
    pub eval_every: usize,
    /// Eval queries used for the KL and staleness diagnostics.
    pub diagnostic_queries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 128,
            k_hard: 64,
            k_uniform: 64,
            uniform_negatives: true,
            subset_mode: SubsetMode::TopK,
            beta: 1.0,
            corrector_loss: CorrectorLossKind::Ce,
            corrector_loss_weight: 10.0,
            buffer_policy: BufferPolicy::Never,
            use_corrector: true,
            encoder_lr: 1e-3,
            corrector_lr: 1e-3,
            seed: 0,
            eval_every: 500,
            diagnostic_queries: 64,
        }
    }
}

impl TrainConfig {
    /// Sets the buffer policy and scorer for one of the reference arms.
    /// The exhaustive arm refreshes every `refresh_every` steps.
    pub fn for_arm(mut self, arm: Arm, refresh_every: usize) -> Self {
        match arm {
            Arm::Stale => {
                self.use_corrector = false;
                self.buffer_policy = BufferPolicy::Never;
            }
            Arm::Exhaustive => {
                self.use_corrector = false;
                self.buffer_policy = BufferPolicy::EveryRSteps(refresh_every);
            }
            Arm::Corrector => {
                self.use_corrector = true;
                self.buffer_policy = BufferPolicy::Never;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if let BufferPolicy::EveryRSteps(0) = self.buffer_policy {
            return Err(Error::invalid("refresh period R must be at least 1"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        for (name, v) in [
            ("encoder_lr", self.encoder_lr),
            ("corrector_lr", self.corrector_lr),
            ("corrector_loss_weight", self.corrector_loss_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub(crate) fn effective_k_uniform(&self) -> usize {
        if self.uniform_negatives {
            self.k_uniform
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task_loss: f64,
    pub corrector_loss: f64,
    pub subset_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// `(k, recall@k)` pairs.
    pub recall: Vec<(usize, f64)>,
    pub reembed_counter: u64,
    pub staleness_l1: f64,
    /// `KL(P || P_h)`; `None` without a corrector.
    pub kl_corrected: Option<f64>,
    pub kl_stale: f64,
    /// Task-specific score, e.g. answer accuracy for the RLM trainer.
    pub accuracy: Option<f64>,
}

impl EvalRecord {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

/// Seeded run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_digest: String,
    pub arm: String,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub reembed_counter: u64,
    /// Rows encoded fresh for training subsets (never written to the buffer).
    pub fresh_rows_encoded: u64,
}

impl ExperimentReport {
    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    /// One JSON object per eval.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.evals {
            let line = serde_json::json!({
                "config_digest": self.config_digest,
                "arm": self.arm,
                "eval": e,
            });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub const CSV_HEADER: [&'static str; 12] = [
        "config_digest",
        "arm",
        "steps",
        "recall@1",
        "recall@5",
        "recall@10",
        "recall@20",
        "recall@100",
        "accuracy",
        "reembed_counter",
        "fresh_rows_encoded",
        "kl_corrected",
    ];

    /// Final summary row matching [`ExperimentReport::CSV_HEADER`].
    pub fn csv_row(&self) -> Vec<String> {
        let fin = self.final_eval();
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut row = vec![self.config_digest.clone(), self.arm.clone(), self.steps.len().to_string()];
        for k in RECALL_KS {
            row.push(fmt(fin.and_then(|e| e.recall_at(k))));
        }
        row.push(fmt(fin.and_then(|e| e.accuracy)));
        row.push(self.reembed_counter.to_string());
        row.push(self.fresh_rows_encoded.to_string());
        row.push(fmt(fin.and_then(|e| e.kl_corrected)));
        row
    }
}

/// Fraction of queries whose label ranks within the top `k` of
/// `<query, target>` over all targets.
pub fn recall_from_embeddings(
    queries: &EmbeddingMatrix,
    targets: &EmbeddingMatrix,
    labels: &[usize],
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if labels.len() != queries.rows() {
        return Err(Error::shape(format!(
            "{} labels for {} queries",
            labels.len(),
            queries.rows()
        )));
    }
    if queries.rows() == 0 {
        return Err(Error::Empty("eval queries"));
    }
    let mut hits = vec![0usize; ks.len()];
    for (q, &y) in queries.iter_rows().zip(labels) {
        let s = numkernel::scores_for(q, targets)?;
        // Rank = number of targets ordered strictly before the label under
        // (score desc, index asc).
        let sy = s[y];
        let rank = s
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > sy || (v == sy && j < y))
            .count();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    let m = queries.rows() as f64;
    Ok(ks.iter().zip(hits).map(|(&k, h)| (k, h as f64 / m)).collect())
}

/// Recall@k under brute-force scoring with fresh encoders. The corrector
/// plays no part at prediction time.
pub fn evaluate_recall(
    f: &MlpNet,
    g: &MlpNet,
    queries_raw: &EmbeddingMatrix,
    targets_raw: &EmbeddingMatrix,
    labels: &[usize],
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let q = f.predict(queries_raw)?;
    let t = g.predict(targets_raw)?;
    recall_from_embeddings(&q, &t, labels, ks)
}

/// Error for a non-finite loss at `step`.
pub(crate) fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            what: format!("{what} = {v}"),
        })
    }
}

#[cfg(test)]
mod tests;
