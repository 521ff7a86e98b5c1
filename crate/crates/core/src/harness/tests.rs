use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use serde_json::{json, Value};

use super::config::{apply_overrides, parse_flat, to_flat};
use super::*;
use crate::net::{InitMode, MlpNet, MlpSpec};
use crate::numkernel::{EmbeddingMatrix, Rng};
use crate::synth::SynthConfig;
use crate::trainer::IsolatedConfig;

fn tiny_synth() -> SynthConfig {
    SynthConfig {
        n_targets: 128,
        n_probes: 16,
        n_mixture_components: 4,
        ..SynthConfig::default()
    }
}

fn tiny_sweep() -> SweepSpec {
    SweepSpec {
        synth: tiny_synth(),
        isolated: IsolatedConfig {
            max_epochs: 3,
            patience: 2,
            query_batch: 8,
            target_batch: 32,
            ..IsolatedConfig::default()
        },
        drift_scales: vec![0.0, 0.2],
        depths: vec![0, 1],
        widths: vec![4, 8],
        fractions: vec![1.0],
        seeds: 2,
        master_seed: 3,
    }
}

#[test]
fn command_names_round_trip() {
    for c in Command::ALL {
        assert_eq!(c.as_str().parse::<Command>().unwrap(), c);
    }
    assert!("train".parse::<Command>().is_err());
}

#[test]
fn digest_is_stable_and_seed_free_digest_ignores_seed() {
    let a = TrainCorrectorConfig::default();
    let mut b = a.clone();
    b.set_seed(9);
    assert_eq!(config_digest(&a).unwrap(), config_digest(&a.clone()).unwrap());
    assert_ne!(config_digest(&a).unwrap(), config_digest(&b).unwrap());
    assert_eq!(a.cell_digest().unwrap(), b.cell_digest().unwrap());
}

#[test]
fn flat_config_parses_and_overrides() {
    let pairs = parse_flat("# comment\nsynth.n_targets = 64\n\nisolated.loss = mse  # trailing\n").unwrap();
    assert_eq!(pairs.len(), 2);
    let c = apply_overrides(&TrainCorrectorConfig::default(), &pairs).unwrap();
    assert_eq!(c.synth.n_targets, 64);
    assert_eq!(c.isolated.loss, crate::trainer::CorrectorLossKind::Mse);
    assert!(parse_flat("no equals sign").is_err());
    let bad = vec![("synth.nope".to_string(), "1".to_string())];
    assert!(apply_overrides(&TrainCorrectorConfig::default(), &bad).is_err());
}

#[test]
fn flat_dump_reparses_to_same_config() {
    let mut c = TrainJointConfig::default();
    c.train.buffer_policy = crate::trainer::BufferPolicy::EveryRSteps(7);
    let text = to_flat(&c).unwrap();
    let back: TrainJointConfig = apply_overrides(&TrainJointConfig::default(), &parse_flat(&text).unwrap()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn sweep_cell_count_is_axis_product() {
    let s = tiny_sweep();
    let cells = s.cells();
    // depth 0 contributes one width
    assert_eq!(cells.len(), 2 * (1 + 2) * 1 * 2);
    let digests: HashSet<String> = cells.iter().map(|c| config_digest(&c.config).unwrap()).collect();
    assert_eq!(digests.len(), cells.len());
    let cap = SweepSpec::capacity();
    assert_eq!(cap.cells().len(), 3 * (1 + 4 + 4) * 10);
}

#[test]
fn sweep_replicates_share_seed_across_axes() {
    let cells = tiny_sweep().cells();
    for c in &cells {
        assert_eq!(c.config.synth.seed, tiny_sweep().replicate_seed(c.replicate));
    }
    assert_ne!(tiny_sweep().replicate_seed(0), tiny_sweep().replicate_seed(1));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_sweep();
    let m = execute(Command::SweepCapacity, &serde_json::to_value(&spec).unwrap(), 3, dir.path()).unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join(SWEEP_CSV)).unwrap();
    assert_eq!(rdr.headers().unwrap().len(), sweep::SWEEP_CSV_HEADER.len());
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), spec.cells().len());
    assert!(rows.iter().all(|r| &r[13] == "ok"));
    assert_eq!(m.metrics["n_cells"], rows.len() as f64);
    // zero drift: identity corrector stays at zero divergence
    for r in rows.iter().filter(|r| &r[3] == "0") {
        assert!(r[11].parse::<f64>().unwrap() <= 1e-9, "{r:?}");
    }
}

#[test]
fn failed_cell_is_flagged_and_sweep_continues() {
    let mut spec = tiny_sweep();
    spec.isolated.query_batch = 0;
    let results = run_sweep(&spec).unwrap();
    assert_eq!(results.len(), spec.cells().len());
    assert!(results.iter().all(|r| !r.ok()));
}

#[test]
fn rerun_from_manifest_is_bit_exact() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = json!({"synth": tiny_synth(), "isolated": {"max_epochs": 5, "query_batch": 8, "target_batch": 32}});
    let m1 = execute(Command::TrainCorrector, &cfg, 11, a.path()).unwrap();
    let m2 = rerun(a.path(), b.path()).unwrap();
    assert!(m1.same_results(&m2));
    assert!(m1.outputs.contains_key("corrector.bin"));
    assert!(!m1.outputs.contains_key(MANIFEST_FILE));
    let other = tempfile::tempdir().unwrap();
    let m3 = execute(Command::TrainCorrector, &cfg, 12, other.path()).unwrap();
    assert!(!m1.same_results(&m3));
    assert_eq!(m1.cell_digest, m3.cell_digest);
}

#[test]
fn synth_gen_writes_task_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = execute(Command::SynthGen, &serde_json::to_value(tiny_synth()).unwrap(), 1, dir.path()).unwrap();
    assert!(m.outputs.keys().any(|k| k.starts_with("task/")));
    assert!(m.metrics["staleness_kl"] > 0.0);
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = execute(Command::SynthGen, &json!({"n_targets": "many"}), 1, dir.path()).unwrap_err();
    assert!(matches!(err, crate::Error::InvalidArgument(_)));
    assert!(execute(Command::Report, &json!({}), 1, dir.path()).is_err());
}

fn record(digest: &str, seed: u64, config: Value, v: f64) -> RunRecord {
    RunRecord {
        command: "train-corrector".into(),
        cell_digest: digest.into(),
        config,
        seed,
        metrics: BTreeMap::from([("kl".to_string(), v)]),
    }
}

#[test]
fn report_single_run_passes_through() {
    let cells = aggregate(&[record("a", 1, json!({}), 0.25)]).unwrap();
    assert_eq!(cells.len(), 1);
    let m = &cells[0].metrics["kl"];
    assert_eq!((m.n, m.median, m.q25, m.q75), (1, 0.25, 0.25, 0.25));
}

#[test]
fn report_two_seeds_take_midpoint() {
    let cells = aggregate(&[record("a", 1, json!({}), 1.0), record("a", 2, json!({}), 2.0)]).unwrap();
    assert_eq!(cells[0].metrics["kl"].median, 1.5);
    assert_eq!(cells[0].seeds, vec![1, 2]);
}

#[test]
fn report_aborts_on_digest_collision() {
    let err = aggregate(&[record("a", 1, json!({"x": 1}), 1.0), record("a", 2, json!({"x": 2}), 2.0)]).unwrap_err();
    assert!(matches!(err, crate::Error::DigestCollision { .. }));
}

#[test]
fn report_over_runs_and_sweeps() {
    let root = tempfile::tempdir().unwrap();
    let cfg = json!({"synth": tiny_synth(), "isolated": {"max_epochs": 2, "query_batch": 8, "target_batch": 32}});
    let mut dirs: Vec<PathBuf> = Vec::new();
    for seed in [1, 2, 3] {
        let d = root.path().join(format!("run{seed}"));
        execute(Command::TrainCorrector, &cfg, seed, &d).unwrap();
        dirs.push(d);
    }
    let sweep_dir = root.path().join("sweep");
    let spec = tiny_sweep();
    execute(Command::SweepCapacity, &serde_json::to_value(&spec).unwrap(), 3, &sweep_dir).unwrap();
    dirs.push(sweep_dir);
    let out = root.path().join("report");
    let cells = run_report(&dirs, &out).unwrap();
    let sweep_cells = spec.cells().len() / spec.seeds;
    assert_eq!(cells.len(), 1 + sweep_cells);
    assert_eq!(cells[0].seeds.len(), 3);
    assert!(cells[1..].iter().all(|c| c.seeds.len() == spec.seeds));
    let mut rdr = csv::Reader::from_path(out.join(REPORT_CSV)).unwrap();
    assert_eq!(rdr.headers().unwrap(), report::REPORT_CSV_HEADER.as_slice());
    let rows = rdr.records().count();
    let metric_rows: usize = cells.iter().map(|c| c.metrics.len()).sum();
    assert_eq!(rows, metric_rows);
    assert!(out.join(REPORT_JSON).is_file());
    assert!(run_report(&[], &out).is_err());
}

#[test]
fn neighbor_precision_trivial_cases() {
    let mut rng = Rng::new(5);
    let a = EmbeddingMatrix::new(50, 4, (0..200).map(|_| rng.normal()).collect()).unwrap();
    let q = EmbeddingMatrix::new(10, 4, (0..40).map(|_| rng.normal()).collect()).unwrap();
    let b = EmbeddingMatrix::new(50, 4, (0..200).map(|_| rng.normal()).collect()).unwrap();
    assert_eq!(neighbor_precision(&q, &a, &a, 10).unwrap(), 1.0);
    assert_eq!(neighbor_precision(&q, &a, &b, 50).unwrap(), 1.0);
    assert!(neighbor_precision(&q, &a, &b, 5).unwrap() < 1.0);
}

#[test]
fn small_equal_to_large_is_perfect_before_training() {
    let cfg = SmallLargeConfig {
        synth: tiny_synth(),
        small_depth: 2,
        small_width: 64,
        steps: 0,
        ks: vec![10, 128],
        ..SmallLargeConfig::default()
    };
    // Same architecture but independent init streams: only k = N is exact.
    let rows = small_approximates_large(&cfg).unwrap();
    assert_eq!(rows[1].uncorrected, 1.0);
    assert_eq!(rows[1].corrected, 1.0);
    let s = &cfg.synth;
    let net = MlpNet::init(MlpSpec::residual(s.dim, 1, 8), InitMode::HeNormal, &mut Rng::new(0)).unwrap();
    let cloud = crate::synth::gen_targets(s).unwrap();
    let e = net.predict(&cloud.points).unwrap();
    let probes = crate::synth::gen_probes(s, &cloud.mixture);
    assert_eq!(neighbor_precision(&probes, &e, &e, 10).unwrap(), 1.0);
}

#[test]
fn default_configs_deserialize_for_every_run_command() {
    for c in Command::ALL.into_iter().filter(|c| c.is_run()) {
        let v = default_config(c).unwrap();
        let z = seedless_config(c, &v).unwrap();
        assert_eq!(seedless_config(c, &z).unwrap(), z);
    }
}
