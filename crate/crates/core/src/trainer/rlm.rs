//! Toy retrieval-augmented model: a retriever `(f, g)` feeding a linear
//! reader over `[x ; y]`, trained with reader NLL plus perplexity
//! distillation.

use serde::{Deserialize, Serialize};

use crate::buffer::{RefreshRows, TargetBuffer};
use crate::error::{Error, Result};
use crate::harness::config_digest;
use crate::net::{InitMode, MlpNet, MlpSpec};
use crate::numkernel::{self, EmbeddingMatrix, Rng};
use crate::optim::{adam_step, AdamState};
use crate::softmax_approx::{corrector_loss_ce, select_from_scores, truncated_from_rows, TruncatedDistribution};
use crate::synth::RlmTask;

use super::joint::{arm_name, check_joint_dims, Diagnostics, JointModels};
use super::{check_finite, BufferPolicy, ExperimentReport, StepRecord, TrainConfig};

const STREAM_STEPS: u64 = 31;

/// `-log P_LM(a | x)` with `P_LM = sum_y P(a | y, x) P~(y | x)` and its
/// gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ReaderNll {
    pub loss: f64,
    /// `dL/ds_y` for each subset member.
    pub grad_retriever_logits: Vec<f64>,
    /// `dL/dz` for each member's vocab logits.
    pub grad_reader_logits: Vec<Vec<f64>>,
}

fn answer_log_probs(reader_logits: &[Vec<f64>], answer: usize) -> Result<Vec<Vec<f64>>> {
    reader_logits
        .iter()
        .map(|z| {
            if answer >= z.len() {
                return Err(Error::OutOfRange {
                    index: answer,
                    len: z.len(),
                });
            }
            numkernel::log_softmax(z, 1.0)
        })
        .collect()
}

fn check_members(p: &TruncatedDistribution, reader_logits: &[Vec<f64>]) -> Result<()> {
    if reader_logits.len() != p.len() {
        return Err(Error::shape(format!(
            "{} reader rows for a subset of {}",
            reader_logits.len(),
            p.len()
        )));
    }
    Ok(())
}

/// Reader negative log-likelihood of `answer`, marginalized over the subset.
pub fn reader_nll(p: &TruncatedDistribution, reader_logits: &[Vec<f64>], answer: usize) -> Result<ReaderNll> {
    check_members(p, reader_logits)?;
    let lp_reader = answer_log_probs(reader_logits, answer)?;
    let lp_ret = p.log_probs();
    let joint: Vec<f64> = lp_ret.iter().zip(&lp_reader).map(|(r, a)| r + a[answer]).collect();
    let log_plm = numkernel::log_sum_exp(&joint, 1.0)?;
    let posterior: Vec<f64> = joint.iter().map(|j| (j - log_plm).exp()).collect();
    let grad_retriever_logits = p
        .probs
        .iter()
        .zip(&posterior)
        .map(|(pt, w)| p.beta * (pt - w))
        .collect();
    let grad_reader_logits = lp_reader
        .iter()
        .zip(&posterior)
        .map(|(lp, &w)| {
            lp.iter()
                .enumerate()
                .map(|(v, l)| w * (l.exp() - if v == answer { 1.0 } else { 0.0 }))
                .collect()
        })
        .collect();
    Ok(ReaderNll {
        loss: -log_plm,
        grad_retriever_logits,
        grad_reader_logits,
    })
}

/// Cross-entropy `-sum_y P_a(y) log P~(y)` where `P_a` normalizes the
/// reader's answer likelihood over the subset. `P_a` is a constant.
pub fn perplexity_distillation(p: &TruncatedDistribution, reader_logits: &[Vec<f64>], answer: usize) -> Result<(f64, Vec<f64>)> {
    check_members(p, reader_logits)?;
    let lp_reader = answer_log_probs(reader_logits, answer)?;
    let la: Vec<f64> = lp_reader.iter().map(|l| l[answer]).collect();
    let pa = numkernel::softmax(&la, 1.0)?;
    let lp_ret = p.log_probs();
    let loss = -pa.iter().zip(&lp_ret).map(|(a, l)| a * l).sum::<f64>();
    let grad = p.probs.iter().zip(&pa).map(|(pt, a)| p.beta * (pt - a)).collect();
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlmConfig {
    pub train: TrainConfig,
    pub reader_lr: f64,
}

impl Default for RlmConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                k_hard: 32,
                k_uniform: 0,
                uniform_negatives: false,
                ..TrainConfig::default()
            },
            reader_lr: 1e-2,
        }
    }
}

/// Reference arms for the RLM comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RlmArm {
    /// Retriever never updated; only the reader trains.
    Frozen,
    /// Subsets from the corrector over a never-refreshed buffer.
    Corrector,
    /// Subsets from the buffer, refreshed every `R` steps.
    Exhaustive,
}

impl RlmConfig {
    pub fn for_arm(mut self, arm: RlmArm, refresh_every: usize) -> Self {
        let t = &mut self.train;
        match arm {
            RlmArm::Frozen => {
                t.encoder_lr = 0.0;
                t.use_corrector = false;
                t.buffer_policy = BufferPolicy::Never;
            }
            RlmArm::Corrector => {
                t.use_corrector = true;
                t.buffer_policy = BufferPolicy::Never;
            }
            RlmArm::Exhaustive => {
                t.use_corrector = false;
                t.buffer_policy = BufferPolicy::EveryRSteps(refresh_every);
            }
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlmModels {
    pub retriever: JointModels,
    pub reader: MlpNet,
}

impl RlmModels {
    pub fn init(
        encoder: &MlpSpec,
        corrector: &MlpSpec,
        init_scale: f64,
        raw_dim: usize,
        vocab_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let retriever = JointModels::init(encoder, corrector, init_scale, seed)?;
        let spec = MlpSpec::new(2 * raw_dim, vec![], vocab_size, false)?;
        let reader = MlpNet::init(spec, InitMode::HeNormal, &mut Rng::new(seed).derive(4))?;
        Ok(Self { retriever, reader })
    }
}

#[derive(Debug, Clone)]
pub struct RlmOutcome {
    pub models: RlmModels,
    pub buffer: TargetBuffer,
    pub report: ExperimentReport,
}

/// Answer accuracy of the trained model: retrieve the top `k` targets with
/// the fresh encoders, marginalize the reader over them, and compare the
/// argmax answer with the gold answer.
pub fn answer_accuracy(models: &RlmModels, task: &RlmTask, k: usize, beta: f64) -> Result<f64> {
    let toy = &task.toy;
    let q = models.retriever.f.predict(&toy.eval_queries)?;
    let t = models.retriever.g.predict(&toy.targets_raw)?;
    let mut correct = 0usize;
    for i in 0..q.rows() {
        let scores = numkernel::scores_for(q.row(i), &t)?;
        let mut top = numkernel::top_k(&scores, k)?;
        top.sort_unstable();
        let logits: Vec<f64> = top.iter().map(|&j| scores[j]).collect();
        let p = numkernel::softmax(&logits, beta)?;
        let pairs = pair_inputs(toy.eval_queries.row(i), &task.contents, &top);
        let reader = models.reader.predict(&pairs)?;
        let mut p_lm = vec![0.0; reader.dim()];
        for (j, pj) in p.iter().enumerate() {
            let pa = numkernel::softmax(reader.row(j), 1.0)?;
            for (acc, v) in p_lm.iter_mut().zip(pa) {
                *acc += pj * v;
            }
        }
        if numkernel::argmax(&p_lm) == Some(task.eval_gold[i]) {
            correct += 1;
        }
    }
    Ok(correct as f64 / q.rows() as f64)
}

/// Rows `[x ; c_j]` for each listed target's content.
fn pair_inputs(x: &[f64], contents: &EmbeddingMatrix, members: &[usize]) -> EmbeddingMatrix {
    let d = x.len() + contents.dim();
    let mut data = Vec::with_capacity(members.len() * d);
    for &j in members {
        data.extend_from_slice(x);
        data.extend_from_slice(contents.row(j));
    }
    EmbeddingMatrix::from_raw(members.len(), d, data)
}

/// Retriever, reader and corrector training with per-example subsets.
pub fn train_rlm(task: &RlmTask, models: RlmModels, config: &RlmConfig) -> Result<RlmOutcome> {
    let tc = &config.train;
    tc.validate()?;
    if !(config.reader_lr.is_finite() && config.reader_lr >= 0.0) {
        return Err(Error::invalid("reader_lr must be finite and non-negative"));
    }
    let toy = &task.toy;
    check_joint_dims(&models.retriever, toy.targets_raw.dim())?;
    if models.reader.in_dim() != toy.targets_raw.dim() + task.contents.dim() || models.reader.out_dim() != task.model.vocab_size() {
        return Err(Error::shape("reader must map [x ; c] to vocab logits"));
    }
    let RlmModels {
        retriever: JointModels {
            mut f,
            mut g,
            mut corrector,
        },
        mut reader,
    } = models;
    let n = toy.targets_raw.rows();
    let n_train = toy.train_queries.rows();
    let batch = tc.batch_size.min(n_train);
    let k_uniform = tc.effective_k_uniform();
    if tc.k_hard + k_uniform > n {
        return Err(Error::invalid("k_hard + k_uniform exceeds the number of targets"));
    }
    let beta = tc.beta;
    let mut buffer = TargetBuffer::init_from_encoder(&g, &toy.targets_raw)?;
    let mut opt_f = AdamState::new(tc.encoder_lr);
    let mut opt_g = AdamState::new(tc.encoder_lr);
    let mut opt_r = AdamState::new(config.reader_lr);
    let mut opt_h = AdamState::new(tc.corrector_lr);
    let mut rng = Rng::new(tc.seed).derive(STREAM_STEPS);
    let diag = Diagnostics {
        queries_raw: &toy.eval_queries,
        labels: &toy.eval_labels,
        targets_raw: &toy.targets_raw,
        n_diag: tc.diagnostic_queries,
        beta,
    };
    let mut report = ExperimentReport {
        config_digest: config_digest(config)?,
        arm: if tc.encoder_lr == 0.0 { "frozen".into() } else { arm_name(tc) },
        steps: Vec::with_capacity(tc.steps),
        evals: Vec::new(),
        reembed_counter: 0,
        fresh_rows_encoded: 0,
    };
    let eval = |step: usize, f: &MlpNet, g: &MlpNet, h: &MlpNet, r: &MlpNet, buffer: &TargetBuffer| -> Result<_> {
        let mut rec = diag.eval(step, f, g, tc.use_corrector.then_some(h), buffer)?;
        let models = RlmModels {
            retriever: JointModels {
                f: f.clone(),
                g: g.clone(),
                corrector: h.clone(),
            },
            reader: r.clone(),
        };
        rec.accuracy = Some(answer_accuracy(&models, task, tc.k_hard, beta)?);
        Ok(rec)
    };
    report.evals.push(eval(0, &f, &g, &corrector, &reader, &buffer)?);

    for step in 0..tc.steps {
        let mut picks = rng.sample_indices(n_train, batch);
        picks.sort_unstable();
        let x_raw = toy.train_queries.select_rows(&picks)?;
        let (fx, f_cache) = f.forward(&x_raw)?;
        let approx = if tc.use_corrector {
            corrector.predict(buffer.embeddings())?
        } else {
            buffer.embeddings().clone()
        };
        let mut subsets = Vec::with_capacity(batch);
        for i in 0..batch {
            let scores = numkernel::scores_for(fx.row(i), &approx)?;
            subsets.push(select_from_scores(&scores, beta, tc.k_hard, k_uniform, tc.subset_mode, None, &mut rng)?);
        }
        let mut union: Vec<usize> = subsets.iter().flatten().copied().collect();
        union.sort_unstable();
        union.dedup();
        let (g_u, g_cache) = g.forward(&toy.targets_raw.select_rows(&union)?)?;
        report.fresh_rows_encoded += union.len() as u64;
        let pos = |y: usize| union.binary_search(&y).expect("subset members are in the union");

        let mut pair_rows = Vec::new();
        let mut pair_data = Vec::new();
        for (i, s) in subsets.iter().enumerate() {
            let xr = x_raw.row(i);
            for &y in s {
                pair_data.extend_from_slice(xr);
                pair_data.extend_from_slice(task.contents.row(y));
                pair_rows.push((i, y));
            }
        }
        let pairs = EmbeddingMatrix::new(pair_rows.len(), reader.in_dim(), pair_data)?;
        let (z, r_cache) = reader.forward(&pairs)?;

        let d = fx.dim();
        let inv_b = 1.0 / batch as f64;
        let mut grad_fx = vec![0.0; batch * d];
        let mut grad_gu = vec![0.0; union.len() * d];
        let mut grad_z = vec![0.0; z.rows() * z.dim()];
        let mut nll_total = 0.0;
        let mut pd_total = 0.0;
        let mut dists = Vec::with_capacity(batch);
        let mut offset = 0;
        for (i, s) in subsets.iter().enumerate() {
            let rows = g_u.select_rows(&s.iter().map(|&y| pos(y)).collect::<Vec<_>>())?;
            let dist = truncated_from_rows(i, fx.row(i), s, &rows, beta)?;
            let logits: Vec<Vec<f64>> = (0..s.len()).map(|j| z.row(offset + j).to_vec()).collect();
            let answer = task.train_answers[picks[i]];
            let nll = reader_nll(&dist, &logits, answer)?;
            let (pd, pd_grad) = perplexity_distillation(&dist, &logits, answer)?;
            nll_total += nll.loss * inv_b;
            pd_total += pd * inv_b;
            let fxi = fx.row(i);
            for (j, &y) in s.iter().enumerate() {
                let gs = 0.5 * inv_b * (nll.grad_retriever_logits[j] + pd_grad[j]);
                let gy = rows.row(j);
                for k in 0..d {
                    grad_fx[i * d + k] += gs * gy[k];
                }
                let u = pos(y);
                for k in 0..d {
                    grad_gu[u * d + k] += gs * fxi[k];
                }
                let zrow = &mut grad_z[(offset + j) * z.dim()..(offset + j + 1) * z.dim()];
                for (a, b) in zrow.iter_mut().zip(&nll.grad_reader_logits[j]) {
                    *a += 0.5 * inv_b * b;
                }
            }
            offset += s.len();
            dists.push(dist);
        }
        let task_loss = 0.5 * (nll_total + pd_total);
        check_finite(step, "rlm loss", task_loss)?;
        f.backward(&f_cache, &EmbeddingMatrix::new(batch, d, grad_fx)?)?;
        g.backward(&g_cache, &EmbeddingMatrix::new(union.len(), d, grad_gu)?)?;
        reader.backward(&r_cache, &EmbeddingMatrix::new(z.rows(), z.dim(), grad_z)?)?;
        if !corrector.grads_are_zero() {
            return Err(Error::invalid("task loss leaked gradient into the corrector"));
        }
        adam_step(&mut f, &mut opt_f)?;
        adam_step(&mut g, &mut opt_g)?;
        adam_step(&mut reader, &mut opt_r)?;

        let mut corrector_loss = 0.0;
        if tc.use_corrector {
            let (h_u, h_cache) = corrector.forward(&buffer.embeddings().select_rows(&union)?)?;
            let mut acc = vec![0.0; union.len() * d];
            for (i, (s, pt)) in subsets.iter().zip(&dists).enumerate() {
                let idx: Vec<usize> = s.iter().map(|&y| pos(y)).collect();
                let h_rows = h_u.select_rows(&idx)?;
                let ph = truncated_from_rows(i, fx.row(i), s, &h_rows, beta)?;
                let l = corrector_loss_ce(pt, &ph, fx.row(i), &h_rows)?;
                corrector_loss += l.loss * inv_b;
                for (j, &u) in idx.iter().enumerate() {
                    for (k, v) in l.grad_rows.row(j).iter().enumerate() {
                        acc[u * d + k] += v * inv_b * tc.corrector_loss_weight;
                    }
                }
            }
            check_finite(step, "corrector loss", corrector_loss)?;
            corrector.backward(&h_cache, &EmbeddingMatrix::new(union.len(), d, acc)?)?;
            if !(f.grads_are_zero() && g.grads_are_zero() && reader.grads_are_zero()) {
                return Err(Error::invalid("corrector loss leaked gradient into the retriever or reader"));
            }
            adam_step(&mut corrector, &mut opt_h)?;
        }

        report.steps.push(StepRecord {
            step,
            task_loss,
            corrector_loss,
            subset_size: union.len(),
        });
        let done = step + 1;
        if tc.buffer_policy.refresh_due(done) {
            buffer.refresh(&g, &toy.targets_raw, &RefreshRows::All, done as u64)?;
        }
        if (tc.eval_every > 0 && done % tc.eval_every == 0) || done == tc.steps {
            report.evals.push(eval(done, &f, &g, &corrector, &reader, &buffer)?);
        }
    }
    report.reembed_counter = buffer.reembed_counter();
    Ok(RlmOutcome {
        models: RlmModels {
            retriever: JointModels { f, g, corrector },
            reader,
        },
        buffer,
        report,
    })
}
