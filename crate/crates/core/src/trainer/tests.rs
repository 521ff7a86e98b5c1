use super::rlm::{answer_accuracy, perplexity_distillation, reader_nll};
use super::*;
use crate::net::{InitMode, MlpSpec};
use crate::numkernel::Rng;
use crate::optim::{adam_step, AdamState};
use crate::softmax_approx::TruncatedDistribution;
use crate::synth::{gen_retrieval_toy, RetrievalToyConfig, RlmTask, RlmTaskConfig, SynthConfig, SynthTask};

fn small_toy(seed: u64) -> crate::synth::RetrievalToy {
    gen_retrieval_toy(&RetrievalToyConfig {
        n_targets: 256,
        n_train_queries: 128,
        n_eval_queries: 64,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 25,
        batch_size: 8,
        k_hard: 8,
        k_uniform: 8,
        eval_every: 10,
        diagnostic_queries: 16,
        seed,
        ..Default::default()
    }
}

fn small_models(seed: u64) -> JointModels {
    JointModels::init(&MlpSpec::residual(8, 1, 16), &MlpSpec::residual(8, 1, 16), 1.0, seed).unwrap()
}

fn same_trajectory(a: &JointOutcome, b: &JointOutcome) {
    assert_eq!(a.models.f.flat_params(), b.models.f.flat_params());
    assert_eq!(a.models.g.flat_params(), b.models.g.flat_params());
    assert_eq!(a.buffer.embeddings(), b.buffer.embeddings());
    let la: Vec<_> = a.report.steps.iter().map(|s| (s.task_loss.to_bits(), s.subset_size)).collect();
    let lb: Vec<_> = b.report.steps.iter().map(|s| (s.task_loss.to_bits(), s.subset_size)).collect();
    assert_eq!(la, lb);
    for (ea, eb) in a.report.evals.iter().zip(&b.report.evals) {
        assert_eq!(ea.recall, eb.recall);
        assert_eq!(ea.reembed_counter, eb.reembed_counter);
    }
}

#[test]
fn frozen_corrector_with_every_step_refresh_is_exhaustive() {
    let toy = small_toy(1);
    let base = small_config(1);
    let reference = train_joint(&toy, small_models(1), &base.clone().for_arm(Arm::Exhaustive, 1)).unwrap();
    let frozen = TrainConfig {
        use_corrector: true,
        corrector_lr: 0.0,
        buffer_policy: BufferPolicy::EveryRSteps(1),
        ..base
    };
    let out = train_joint(&toy, small_models(1), &frozen).unwrap();
    same_trajectory(&out, &reference);
}

#[test]
fn frozen_corrector_without_refresh_is_stale() {
    let toy = small_toy(2);
    let base = small_config(2);
    let reference = train_joint(&toy, small_models(2), &base.clone().for_arm(Arm::Stale, 1)).unwrap();
    let frozen = TrainConfig {
        corrector_lr: 0.0,
        ..base.for_arm(Arm::Corrector, 1)
    };
    let out = train_joint(&toy, small_models(2), &frozen).unwrap();
    same_trajectory(&out, &reference);
    assert_eq!(out.models.corrector.flat_params(), small_models(2).corrector.flat_params());
}

#[test]
fn reembed_counter_follows_policy() {
    let toy = small_toy(3);
    let n = toy.targets_raw.rows() as u64;
    let cfg = small_config(3);
    for (arm, expect) in [(Arm::Stale, n), (Arm::Corrector, n), (Arm::Exhaustive, n * (1 + 25 / 10))] {
        let out = train_joint(&toy, small_models(3), &cfg.clone().for_arm(arm, 10)).unwrap();
        assert_eq!(out.report.reembed_counter, expect, "{arm:?}");
        assert_eq!(out.buffer.reembed_counter(), expect);
    }
}

#[test]
fn fresh_rows_match_subset_sizes() {
    let toy = small_toy(4);
    let out = train_joint(&toy, small_models(4), &small_config(4)).unwrap();
    let total: usize = out.report.steps.iter().map(|s| s.subset_size).sum();
    assert_eq!(out.report.fresh_rows_encoded, total as u64);
    assert_eq!(out.report.steps.len(), 25);
    // step 0, 10, 20 and the final step
    let at: Vec<usize> = out.report.evals.iter().map(|e| e.step).collect();
    assert_eq!(at, vec![0, 10, 20, 25]);
}

#[test]
fn identity_corrector_starts_at_stale_kl() {
    let toy = small_toy(5);
    let out = train_joint(&toy, small_models(5), &TrainConfig { steps: 0, ..small_config(5) }).unwrap();
    let e = &out.report.evals[0];
    assert_eq!(e.kl_corrected, Some(e.kl_stale));
    assert_eq!(e.kl_stale, 0.0);
}

#[test]
fn mse_corrector_loss_runs() {
    let toy = small_toy(6);
    let cfg = TrainConfig {
        corrector_loss: CorrectorLossKind::Mse,
        ..small_config(6)
    };
    let out = train_joint(&toy, small_models(6), &cfg).unwrap();
    assert!(out.report.steps.iter().all(|s| s.corrector_loss.is_finite()));
    assert_ne!(out.models.corrector.flat_params(), small_models(6).corrector.flat_params());
}

#[test]
fn bad_configs_rejected() {
    let toy = small_toy(7);
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..small_config(7)
        },
        TrainConfig {
            buffer_policy: BufferPolicy::EveryRSteps(0),
            ..small_config(7)
        },
        TrainConfig {
            beta: 0.0,
            ..small_config(7)
        },
        TrainConfig {
            encoder_lr: f64::NAN,
            ..small_config(7)
        },
        TrainConfig {
            k_hard: 300,
            ..small_config(7)
        },
    ] {
        assert!(train_joint(&toy, small_models(7), &cfg).is_err());
    }
    let wrong = JointModels::init(&MlpSpec::residual(4, 1, 8), &MlpSpec::residual(4, 1, 8), 1.0, 0).unwrap();
    assert!(matches!(train_joint(&toy, wrong, &small_config(7)), Err(Error::Shape(_))));
}

#[test]
fn non_finite_loss_reports_step() {
    let err = check_finite(17, "task loss", f64::NAN).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 17, .. }));
}

#[test]
fn refresh_schedule() {
    let p = BufferPolicy::EveryRSteps(3);
    let due: Vec<usize> = (0..10).filter(|&t| p.refresh_due(t)).collect();
    assert_eq!(due, vec![3, 6, 9]);
    assert!(!BufferPolicy::Never.refresh_due(500));
}

#[test]
fn recall_full_k_is_one() {
    let toy = small_toy(8);
    let m = small_models(8);
    let n = toy.targets_raw.rows();
    let r = evaluate_recall(&m.f, &m.g, &toy.eval_queries, &toy.targets_raw, &toy.eval_labels, &[n]).unwrap();
    assert_eq!(r, vec![(n, 1.0)]);
}

#[test]
fn recall_noiseless_identity_is_one() {
    let toy = gen_retrieval_toy(&RetrievalToyConfig {
        label_noise: 0.0,
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let id = MlpNet::identity(MlpSpec::residual(8, 1, 8)).unwrap();
    let r = evaluate_recall(&id, &id, &toy.eval_queries, &toy.targets_raw, &toy.eval_labels, &[1]).unwrap();
    assert_eq!(r, vec![(1, 1.0)]);
}

#[test]
fn untrained_encoders_are_at_chance() {
    // Independent towers with unrelated outputs; hits ~ Binomial(512, 1/4096).
    let toy = gen_retrieval_toy(&RetrievalToyConfig {
        seed: 10,
        ..Default::default()
    })
    .unwrap();
    let spec = MlpSpec::new(8, vec![32], 8, false).unwrap();
    let f = MlpNet::init(spec.clone(), InitMode::HeNormal, &mut Rng::new(100)).unwrap();
    let g = MlpNet::init(spec, InitMode::HeNormal, &mut Rng::new(200)).unwrap();
    let r = evaluate_recall(&f, &g, &toy.eval_queries, &toy.targets_raw, &toy.eval_labels, &[1]).unwrap();
    let hits = (r[0].1 * 512.0).round() as usize;
    assert!(hits <= 4, "{hits} hits");
}

#[test]
fn recall_breaks_ties_by_index() {
    let q = EmbeddingMatrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
    let t = EmbeddingMatrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
    let r = recall_from_embeddings(&q, &t, &[0, 1], &[1, 2]).unwrap();
    assert_eq!(r, vec![(1, 0.5), (2, 1.0)]);
    assert!(recall_from_embeddings(&q, &t, &[0], &[1]).is_err());
}

#[test]
fn report_serializes() {
    let toy = small_toy(11);
    let out = train_joint(&toy, small_models(11), &small_config(11)).unwrap();
    let mut buf = Vec::new();
    out.report.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), out.report.evals.len());
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["arm"], "corrector");
    }
    assert_eq!(out.report.csv_row().len(), ExperimentReport::CSV_HEADER.len());
}

fn small_synth(scale: f64, seed: u64) -> SynthTask {
    SynthTask::generate(&SynthConfig {
        n_targets: 256,
        n_probes: 32,
        drift_variance_scale: scale,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn isolated_zero_drift_stays_exact() {
    let task = small_synth(0.0, 12);
    let cfg = IsolatedConfig {
        max_epochs: 50,
        ..Default::default()
    };
    let out = train_corrector_isolated(&task, &MlpSpec::residual(8, 2, 16), 1.0, &cfg).unwrap();
    assert!(out.kl_corrected <= 1e-6, "{}", out.kl_corrected);
}

#[test]
fn isolated_zero_epochs_equals_stale() {
    let task = small_synth(0.2, 13);
    let cfg = IsolatedConfig {
        max_epochs: 0,
        ..Default::default()
    };
    let out = train_corrector_isolated(&task, &MlpSpec::residual(8, 2, 16), 0.5, &cfg).unwrap();
    assert_eq!(out.kl_corrected, out.kl_stale);
    assert!(out.kl_stale > 0.0);
    assert_eq!(out.pool_size, 128);
}

#[test]
fn isolated_training_reduces_kl() {
    let task = small_synth(0.2, 14);
    let cfg = IsolatedConfig {
        max_epochs: 200,
        ..Default::default()
    };
    let out = train_corrector_isolated(&task, &MlpSpec::residual(8, 2, 32), 1.0, &cfg).unwrap();
    assert!(out.kl_corrected < out.kl_stale, "{} vs {}", out.kl_corrected, out.kl_stale);
    let mse = train_corrector_isolated(
        &task,
        &MlpSpec::residual(8, 2, 32),
        1.0,
        &IsolatedConfig {
            loss: CorrectorLossKind::Mse,
            ..cfg
        },
    )
    .unwrap();
    assert!(mse.kl_corrected < mse.kl_stale);
}

#[test]
fn isolated_stops_on_patience() {
    let task = small_synth(0.0, 15);
    let cfg = IsolatedConfig {
        patience: 5,
        max_epochs: 1000,
        ..Default::default()
    };
    let out = train_corrector_isolated(&task, &MlpSpec::residual(8, 1, 8), 1.0, &cfg).unwrap();
    assert!(out.epochs < 1000);
}

#[test]
fn isolated_rejects_bad_inputs() {
    let task = small_synth(0.1, 16);
    let spec = MlpSpec::residual(8, 1, 8);
    for frac in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(train_corrector_isolated(&task, &spec, frac, &IsolatedConfig::default()).is_err());
    }
    let wrong = MlpSpec::new(8, vec![8], 8, false).unwrap();
    assert!(train_corrector_isolated(&task, &wrong, 1.0, &IsolatedConfig::default()).is_err());
}

fn random_instance(seed: u64) -> (TruncatedDistribution, Vec<Vec<f64>>, usize) {
    let mut rng = Rng::new(seed);
    let k = 2 + rng.below(6);
    let v = 2 + rng.below(5);
    let beta = 0.5 + 2.0 * rng.uniform();
    let logits: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
    let reader: Vec<Vec<f64>> = (0..k).map(|_| (0..v).map(|_| 2.0 * rng.normal()).collect()).collect();
    let answer = rng.below(v);
    let dist = TruncatedDistribution::from_logits(0, (0..k).collect(), logits, beta).unwrap();
    (dist, reader, answer)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Oracle for `-log sum_y P~(y) P(a|y)` by direct summation.
fn nll_oracle(logits: &[f64], beta: f64, reader: &[Vec<f64>], a: usize) -> f64 {
    let p = numkernel::softmax(logits, beta).unwrap();
    let plm: f64 = p
        .iter()
        .zip(reader)
        .map(|(pi, z)| pi * numkernel::softmax(z, 1.0).unwrap()[a])
        .sum();
    -plm.ln()
}

fn pd_oracle(logits: &[f64], beta: f64, reader: &[Vec<f64>], a: usize) -> f64 {
    let p = numkernel::softmax(logits, beta).unwrap();
    let la: Vec<f64> = reader.iter().map(|z| numkernel::softmax(z, 1.0).unwrap()[a]).collect();
    let z: f64 = la.iter().sum();
    -la.iter().zip(&p).map(|(w, pi)| w / z * pi.ln()).sum::<f64>()
}

#[test]
fn reader_nll_gradients_match_finite_differences() {
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..25 {
        let (dist, reader, a) = random_instance(seed);
        let got = reader_nll(&dist, &reader, a).unwrap();
        assert!(rel_err(got.loss, nll_oracle(&dist.logits, dist.beta, &reader, a)) < 1e-12);
        for j in 0..dist.len() {
            let mut up = dist.logits.clone();
            let mut dn = dist.logits.clone();
            up[j] += eps;
            dn[j] -= eps;
            let fd = (nll_oracle(&up, dist.beta, &reader, a) - nll_oracle(&dn, dist.beta, &reader, a)) / (2.0 * eps);
            worst = worst.max(rel_err(fd, got.grad_retriever_logits[j]));
            for v in 0..reader[j].len() {
                let mut up = reader.clone();
                let mut dn = reader.clone();
                up[j][v] += eps;
                dn[j][v] -= eps;
                let fd = (nll_oracle(&dist.logits, dist.beta, &up, a) - nll_oracle(&dist.logits, dist.beta, &dn, a)) / (2.0 * eps);
                worst = worst.max(rel_err(fd, got.grad_reader_logits[j][v]));
            }
        }
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn distillation_gradients_match_finite_differences() {
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 100..125 {
        let (dist, reader, a) = random_instance(seed);
        let (loss, grad) = perplexity_distillation(&dist, &reader, a).unwrap();
        assert!(rel_err(loss, pd_oracle(&dist.logits, dist.beta, &reader, a)) < 1e-12);
        for j in 0..dist.len() {
            let mut up = dist.logits.clone();
            let mut dn = dist.logits.clone();
            up[j] += eps;
            dn[j] -= eps;
            let fd = (pd_oracle(&up, dist.beta, &reader, a) - pd_oracle(&dn, dist.beta, &reader, a)) / (2.0 * eps);
            worst = worst.max(rel_err(fd, grad[j]));
        }
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn rlm_losses_reject_mismatches() {
    let (dist, reader, _) = random_instance(3);
    assert!(reader_nll(&dist, &reader[1..], 0).is_err());
    assert!(perplexity_distillation(&dist, &reader, 99).is_err());
}

#[test]
fn certain_retrieval_reduces_to_reader_cross_entropy() {
    let dist = TruncatedDistribution::from_logits(0, vec![4], vec![0.3], 1.0).unwrap();
    let z = vec![vec![1.0, -0.5, 2.0]];
    let got = reader_nll(&dist, &z, 2).unwrap();
    let lp = numkernel::log_softmax(&z[0], 1.0).unwrap();
    assert!((got.loss + lp[2]).abs() < 1e-15);
    assert_eq!(got.grad_retriever_logits, vec![0.0]);
    let (pd, g) = perplexity_distillation(&dist, &z, 2).unwrap();
    assert_eq!(pd, 0.0);
    assert_eq!(g, vec![0.0]);
}

#[test]
fn reader_alone_learns_separable_answers() {
    let task = RlmTask::generate(&RlmTaskConfig {
        toy: RetrievalToyConfig {
            n_targets: 256,
            n_train_queries: 512,
            n_eval_queries: 256,
            seed: 17,
            ..Default::default()
        },
        vocab_size: 2,
        query_weight: 0.0,
        target_weight: 3.0,
    })
    .unwrap();
    let toy = &task.toy;
    let spec = MlpSpec::new(16, vec![], 2, false).unwrap();
    let mut reader = MlpNet::init(spec, InitMode::HeNormal, &mut Rng::new(1)).unwrap();
    let mut adam = AdamState::new(0.05);
    let pairs = |q: &EmbeddingMatrix, labels: &[usize]| {
        EmbeddingMatrix::new(
            labels.len(),
            16,
            labels
                .iter()
                .enumerate()
                .flat_map(|(i, &y)| q.row(i).iter().chain(task.contents.row(y)).copied().collect::<Vec<_>>())
                .collect(),
        )
        .unwrap()
    };
    let train = pairs(&toy.train_queries, &toy.train_labels);
    for _ in 0..300 {
        let (z, cache) = reader.forward(&train).unwrap();
        let mut grad = Vec::with_capacity(z.rows() * 2);
        for i in 0..z.rows() {
            let dist = TruncatedDistribution::from_logits(i, vec![toy.train_labels[i]], vec![0.0], 1.0).unwrap();
            let l = reader_nll(&dist, &[z.row(i).to_vec()], task.train_answers[i]).unwrap();
            grad.extend(l.grad_reader_logits[0].iter().map(|g| g / z.rows() as f64));
        }
        reader.backward(&cache, &EmbeddingMatrix::new(z.rows(), 2, grad).unwrap()).unwrap();
        adam_step(&mut reader, &mut adam).unwrap();
    }
    let z = reader.predict(&pairs(&toy.eval_queries, &toy.eval_labels)).unwrap();
    let hits = (0..z.rows()).filter(|&i| numkernel::argmax(z.row(i)) == Some(task.eval_gold[i])).count();
    let acc = hits as f64 / z.rows() as f64;
    assert!(acc >= 0.95, "accuracy {acc}");
}

fn small_rlm_task(seed: u64) -> RlmTask {
    RlmTask::generate(&RlmTaskConfig {
        toy: RetrievalToyConfig {
            n_targets: 128,
            n_train_queries: 64,
            n_eval_queries: 32,
            seed,
            ..Default::default()
        },
        ..Default::default()
    })
    .unwrap()
}

fn small_rlm_config(seed: u64) -> RlmConfig {
    RlmConfig {
        train: TrainConfig {
            steps: 12,
            batch_size: 4,
            k_hard: 8,
            k_uniform: 0,
            uniform_negatives: false,
            eval_every: 5,
            diagnostic_queries: 8,
            seed,
            ..Default::default()
        },
        reader_lr: 1e-2,
    }
}

fn small_rlm_models(task: &RlmTask, seed: u64) -> RlmModels {
    let spec = MlpSpec::residual(8, 1, 16);
    RlmModels::init(&spec, &spec, 1.0, 8, task.config.vocab_size, seed).unwrap()
}

#[test]
fn rlm_runs_and_counts() {
    let task = small_rlm_task(18);
    let cfg = small_rlm_config(18);
    let out = train_rlm(&task, small_rlm_models(&task, 18), &cfg).unwrap();
    assert_eq!(out.report.reembed_counter, 128);
    assert_eq!(out.report.steps.len(), 12);
    assert!(out.report.steps.iter().all(|s| s.task_loss.is_finite() && s.corrector_loss >= 0.0));
    let fin = out.report.final_eval().unwrap();
    let acc = fin.accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(acc, answer_accuracy(&out.models, &task, 8, cfg.train.beta).unwrap());

    let ex = RlmConfig {
        train: cfg.train.clone().for_arm(Arm::Exhaustive, 5),
        ..cfg
    };
    let out = train_rlm(&task, small_rlm_models(&task, 18), &ex).unwrap();
    assert_eq!(out.report.reembed_counter, 128 * 3);
}

#[test]
fn rlm_is_deterministic() {
    let task = small_rlm_task(19);
    let a = train_rlm(&task, small_rlm_models(&task, 19), &small_rlm_config(19)).unwrap();
    let b = train_rlm(&task, small_rlm_models(&task, 19), &small_rlm_config(19)).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.models.reader.flat_params(), b.models.reader.flat_params());
}

#[test]
fn rlm_frozen_retriever_stays_put() {
    let task = small_rlm_task(20);
    let mut cfg = small_rlm_config(20);
    cfg.train.encoder_lr = 0.0;
    let start = small_rlm_models(&task, 20);
    let out = train_rlm(&task, start.clone(), &cfg).unwrap();
    assert_eq!(out.models.retriever.f.flat_params(), start.retriever.f.flat_params());
    assert_eq!(out.models.retriever.g.flat_params(), start.retriever.g.flat_params());
    assert_ne!(out.models.reader.flat_params(), start.reader.flat_params());
}
