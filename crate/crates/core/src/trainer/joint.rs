use crate::buffer::{RefreshRows, TargetBuffer};
use crate::error::{Error, Result};
use crate::harness::config_digest;
use crate::net::{InitMode, MlpNet, MlpSpec};
use crate::numkernel::{self, EmbeddingMatrix, Rng};
use crate::optim::{adam_step, AdamState};
use crate::softmax_approx::{
    corrector_loss_ce, corrector_loss_mse, select_from_scores, task_loss_ce, truncated_from_rows,
};
use crate::synth::RetrievalToy;

use super::{
    check_finite, recall_from_embeddings, CorrectorLossKind, EvalRecord, ExperimentReport, StepRecord, TrainConfig,
    RECALL_KS,
};

const STREAM_STEPS: u64 = 21;

/// Query tower `f`, target tower `g` and corrector `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModels {
    pub f: MlpNet,
    pub g: MlpNet,
    pub corrector: MlpNet,
}

impl JointModels {
    /// Residual towers whose final layers carry `init_scale` times the
    /// He variance, and an identity corrector.
    pub fn init(encoder: &MlpSpec, corrector: &MlpSpec, init_scale: f64, seed: u64) -> Result<Self> {
        let root = Rng::new(seed);
        Ok(Self {
            f: MlpNet::init_scaled(encoder.clone(), InitMode::HeNormal, init_scale, &mut root.derive(1))?,
            g: MlpNet::init_scaled(encoder.clone(), InitMode::HeNormal, init_scale, &mut root.derive(2))?,
            corrector: MlpNet::init(corrector.clone(), InitMode::ZeroResidual, &mut root.derive(3))?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub models: JointModels,
    pub buffer: TargetBuffer,
    pub report: ExperimentReport,
}

pub(crate) struct Diagnostics<'a> {
    pub queries_raw: &'a EmbeddingMatrix,
    pub labels: &'a [usize],
    pub targets_raw: &'a EmbeddingMatrix,
    pub n_diag: usize,
    pub beta: f64,
}

impl Diagnostics<'_> {
    /// Recall, staleness and distribution-gap diagnostics. Encodes every
    /// target for measurement only; the buffer counter is untouched.
    pub fn eval(
        &self,
        step: usize,
        f: &MlpNet,
        g: &MlpNet,
        corrector: Option<&MlpNet>,
        buffer: &TargetBuffer,
    ) -> Result<EvalRecord> {
        let q = f.predict(self.queries_raw)?;
        let t = g.predict(self.targets_raw)?;
        let recall = recall_from_embeddings(&q, &t, self.labels, &RECALL_KS)?;
        let staleness = buffer.staleness_l1(g, self.targets_raw)?;
        let m = self.n_diag.min(q.rows()).max(1);
        let probes = q.select_rows(&(0..m).collect::<Vec<_>>())?;
        let kl_stale = crate::softmax_approx::mean_full_kl(&probes, &t, buffer.embeddings(), self.beta)?;
        let kl_corrected = match corrector {
            Some(h) => Some(crate::softmax_approx::mean_full_kl(
                &probes,
                &t,
                &h.predict(buffer.embeddings())?,
                self.beta,
            )?),
            None => None,
        };
        Ok(EvalRecord {
            step,
            recall,
            reembed_counter: buffer.reembed_counter(),
            staleness_l1: staleness.mean,
            kl_corrected,
            kl_stale,
            accuracy: None,
        })
    }
}

pub(crate) fn arm_name(config: &TrainConfig) -> String {
    match (config.use_corrector, config.buffer_policy) {
        (true, super::BufferPolicy::Never) => "corrector".into(),
        (false, super::BufferPolicy::Never) => "stale".into(),
        (false, super::BufferPolicy::EveryRSteps(r)) => format!("exhaustive_r{r}"),
        (true, super::BufferPolicy::EveryRSteps(r)) => format!("corrector_r{r}"),
    }
}

pub(crate) fn check_joint_dims(models: &JointModels, d_raw: usize) -> Result<()> {
    if models.f.in_dim() != d_raw || models.g.in_dim() != d_raw {
        return Err(Error::shape("encoders must read raw vectors of the task's dimension"));
    }
    let d = models.g.out_dim();
    if models.f.out_dim() != d || models.corrector.in_dim() != d || models.corrector.out_dim() != d {
        return Err(Error::shape("encoder outputs and corrector must share one embedding dimension"));
    }
    Ok(())
}

/// Joint training of `f` and `g` with subsets picked from the buffer
/// (optionally through the corrector). Fresh `g` rows for each step's
/// subset are used for the loss and discarded.
pub fn train_joint(toy: &RetrievalToy, models: JointModels, config: &TrainConfig) -> Result<JointOutcome> {
    config.validate()?;
    check_joint_dims(&models, toy.targets_raw.dim())?;
    let JointModels {
        mut f,
        mut g,
        mut corrector,
    } = models;
    let n = toy.targets_raw.rows();
    let n_train = toy.train_queries.rows();
    let batch = config.batch_size.min(n_train);
    let k_uniform = config.effective_k_uniform();
    if config.k_hard + k_uniform > n {
        return Err(Error::invalid("k_hard + k_uniform exceeds the number of targets"));
    }
    let beta = config.beta;
    let mut buffer = TargetBuffer::init_from_encoder(&g, &toy.targets_raw)?;
    let mut opt_f = AdamState::new(config.encoder_lr);
    let mut opt_g = AdamState::new(config.encoder_lr);
    let mut opt_h = AdamState::new(config.corrector_lr);
    let mut rng = Rng::new(config.seed).derive(STREAM_STEPS);
    let diag = Diagnostics {
        queries_raw: &toy.eval_queries,
        labels: &toy.eval_labels,
        targets_raw: &toy.targets_raw,
        n_diag: config.diagnostic_queries,
        beta,
    };
    let mut report = ExperimentReport {
        config_digest: config_digest(config)?,
        arm: arm_name(config),
        steps: Vec::with_capacity(config.steps),
        evals: Vec::new(),
        reembed_counter: 0,
        fresh_rows_encoded: 0,
    };
    let h_opt = config.use_corrector.then_some(&corrector);
    report.evals.push(diag.eval(0, &f, &g, h_opt, &buffer)?);

    for step in 0..config.steps {
        let mut picks = rng.sample_indices(n_train, batch);
        picks.sort_unstable();
        let labels: Vec<usize> = picks.iter().map(|&i| toy.train_labels[i]).collect();
        let x_raw = toy.train_queries.select_rows(&picks)?;
        let (fx, f_cache) = f.forward(&x_raw)?;

        let approx = if config.use_corrector {
            corrector.predict(buffer.embeddings())?
        } else {
            buffer.embeddings().clone()
        };
        let mut subset = Vec::new();
        for (i, &y) in labels.iter().enumerate() {
            let scores = numkernel::scores_for(fx.row(i), &approx)?;
            subset.extend(select_from_scores(
                &scores,
                beta,
                config.k_hard,
                0,
                config.subset_mode,
                Some(y),
                &mut rng,
            )?);
        }
        subset.extend(rng.sample_indices(n, k_uniform));
        subset.sort_unstable();
        subset.dedup();

        let raw_s = toy.targets_raw.select_rows(&subset)?;
        let (g_s, g_cache) = g.forward(&raw_s)?;
        report.fresh_rows_encoded += subset.len() as u64;

        let d = fx.dim();
        let inv_b = 1.0 / batch as f64;
        let mut grad_fx = vec![0.0; batch * d];
        let mut grad_gs = vec![0.0; subset.len() * d];
        let mut task_loss = 0.0;
        let mut p_true = Vec::with_capacity(batch);
        for (i, &y) in labels.iter().enumerate() {
            let dist = truncated_from_rows(i, fx.row(i), &subset, &g_s, beta)?;
            let l = task_loss_ce(&dist, y, fx.row(i), &g_s)?;
            task_loss += l.loss * inv_b;
            for (a, b) in grad_fx[i * d..(i + 1) * d].iter_mut().zip(&l.grad_query) {
                *a += b * inv_b;
            }
            for (a, b) in grad_gs.iter_mut().zip(l.grad_targets.data()) {
                *a += b * inv_b;
            }
            p_true.push(dist);
        }
        check_finite(step, "task loss", task_loss)?;

        f.backward(&f_cache, &EmbeddingMatrix::new(batch, d, grad_fx)?)?;
        g.backward(&g_cache, &EmbeddingMatrix::new(subset.len(), d, grad_gs)?)?;
        if !corrector.grads_are_zero() {
            return Err(Error::invalid("task loss leaked gradient into the corrector"));
        }
        adam_step(&mut f, &mut opt_f)?;
        adam_step(&mut g, &mut opt_g)?;

        let mut corrector_loss = 0.0;
        if config.use_corrector {
            let b_s = buffer.embeddings().select_rows(&subset)?;
            let (h_s, h_cache) = corrector.forward(&b_s)?;
            let w = config.corrector_loss_weight;
            let grad = match config.corrector_loss {
                CorrectorLossKind::Mse => {
                    let l = corrector_loss_mse(&g_s, &h_s)?;
                    corrector_loss = l.loss;
                    l.grad_rows
                }
                CorrectorLossKind::Ce => {
                    let mut acc = vec![0.0; subset.len() * d];
                    for (i, pt) in p_true.iter().enumerate() {
                        let ph = truncated_from_rows(i, fx.row(i), &subset, &h_s, beta)?;
                        let l = corrector_loss_ce(pt, &ph, fx.row(i), &h_s)?;
                        corrector_loss += l.loss * inv_b;
                        for (a, b) in acc.iter_mut().zip(l.grad_rows.data()) {
                            *a += b * inv_b;
                        }
                    }
                    EmbeddingMatrix::new(subset.len(), d, acc)?
                }
            };
            check_finite(step, "corrector loss", corrector_loss)?;
            let scaled = EmbeddingMatrix::new(subset.len(), d, grad.data().iter().map(|v| v * w).collect())?;
            corrector.backward(&h_cache, &scaled)?;
            if !(f.grads_are_zero() && g.grads_are_zero()) {
                return Err(Error::invalid("corrector loss leaked gradient into the encoders"));
            }
            adam_step(&mut corrector, &mut opt_h)?;
        }

        report.steps.push(StepRecord {
            step,
            task_loss,
            corrector_loss,
            subset_size: subset.len(),
        });

        let done = step + 1;
        if config.buffer_policy.refresh_due(done) {
            buffer.refresh(&g, &toy.targets_raw, &RefreshRows::All, done as u64)?;
        }
        if (config.eval_every > 0 && done % config.eval_every == 0) || done == config.steps {
            let h_opt = config.use_corrector.then_some(&corrector);
            report.evals.push(diag.eval(done, &f, &g, h_opt, &buffer)?);
        }
    }
    report.reembed_counter = buffer.reembed_counter();
    Ok(JointOutcome {
        models: JointModels { f, g, corrector },
        buffer,
        report,
    })
}
