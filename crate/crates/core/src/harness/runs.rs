//! Resolved configs and runners for each harness command.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::buffer::TargetBuffer;
use crate::error::{Error, Result};
use crate::net::{InitMode, MlpNet, MlpSpec};
use crate::numkernel::Rng;
use crate::synth::{gen_retrieval_toy, RetrievalToyConfig, RlmTask, RlmTaskConfig, SynthConfig, SynthTask};
use crate::theory_checks::{
    check_risk_gap, coefficient_of_variation, softmax_tv_sweep, staleness_perturbation_sweep, BoundCheckRecord,
    BoundedLoss,
};
use crate::trainer::{
    evaluate_recall, train_corrector_isolated, train_joint, train_rlm, Arm, BufferPolicy, ExperimentReport,
    IsolatedConfig, JointModels, RlmArm, RlmConfig, RlmModels, TrainConfig, RECALL_KS,
};

use super::small_large::{small_approximates_large, SmallLargeConfig};
use super::sweep::{run_sweep, write_sweep_csv, write_sweep_jsonl, SweepSpec};
use super::{config_digest, Command, SWEEP_CSV, SWEEP_JSONL};

pub type Metrics = BTreeMap<String, f64>;

/// A command's resolved configuration.
pub trait RunConfig: Serialize + DeserializeOwned + Default + Clone {
    /// Points every random stream of the run at `seed`.
    fn set_seed(&mut self, seed: u64);

    /// Digest of the config with its seed zeroed.
    fn cell_digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.set_seed(0);
        config_digest(&c)
    }
}

impl RunConfig for SynthConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCorrectorConfig {
    pub synth: SynthConfig,
    pub isolated: IsolatedConfig,
    pub depth: usize,
    pub width: usize,
    pub sample_fraction: f64,
}

impl Default for TrainCorrectorConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            width: 8 * synth.dim,
            synth,
            isolated: IsolatedConfig::default(),
            depth: 2,
            sample_fraction: 1.0,
        }
    }
}

impl RunConfig for TrainCorrectorConfig {
    fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.isolated.seed = seed;
    }
}

/// Training defaults for the toy retrieval task: smaller batches and
/// subsets than the large-corpus defaults so that subsets stay a small
/// fraction of the 4096 targets.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        k_hard: 16,
        k_uniform: 32,
        encoder_lr: 5e-4,
        corrector_lr: 3e-3,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainJointConfig {
    pub toy: RetrievalToyConfig,
    pub encoder_depth: usize,
    pub encoder_width: usize,
    pub corrector_depth: usize,
    pub corrector_width: usize,
    /// Final-layer variance scale of the encoders at init.
    pub init_scale: f64,
    /// When set, overrides `train.buffer_policy` and `train.use_corrector`.
    pub arm: Option<Arm>,
    pub refresh_every: usize,
    pub train: TrainConfig,
}

impl Default for TrainJointConfig {
    fn default() -> Self {
        Self {
            toy: RetrievalToyConfig::default(),
            encoder_depth: 2,
            encoder_width: 64,
            corrector_depth: 2,
            corrector_width: 32,
            init_scale: 0.3,
            arm: Some(Arm::Corrector),
            refresh_every: 500,
            train: toy_train_config(),
        }
    }
}

impl RunConfig for TrainJointConfig {
    fn set_seed(&mut self, seed: u64) {
        self.toy.seed = seed;
        self.train.seed = seed;
    }
}

impl TrainJointConfig {
    pub fn resolved_train(&self) -> TrainConfig {
        match self.arm {
            Some(arm) => self.train.clone().for_arm(arm, self.refresh_every),
            None => self.train.clone(),
        }
    }

    pub fn models(&self) -> Result<JointModels> {
        let d = self.toy.dim;
        JointModels::init(
            &MlpSpec::residual(d, self.encoder_depth, self.encoder_width),
            &MlpSpec::residual(d, self.corrector_depth, self.corrector_width),
            self.init_scale,
            self.train.seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRlmConfig {
    pub task: RlmTaskConfig,
    pub encoder_depth: usize,
    pub encoder_width: usize,
    pub corrector_depth: usize,
    pub corrector_width: usize,
    pub init_scale: f64,
    /// Supervised steps on the query labels before latent training starts;
    /// every arm begins from the same warm-started retriever.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// When set, overrides the arm-specific fields of `rlm.train`.
    pub arm: Option<RlmArm>,
    pub refresh_every: usize,
    pub rlm: RlmConfig,
}

impl Default for TrainRlmConfig {
    fn default() -> Self {
        Self {
            task: RlmTaskConfig::default(),
            encoder_depth: 2,
            encoder_width: 64,
            corrector_depth: 2,
            corrector_width: 32,
            init_scale: 0.3,
            pretrain_steps: 300,
            pretrain_lr: 1e-3,
            arm: Some(RlmArm::Corrector),
            refresh_every: 500,
            rlm: RlmConfig {
                train: TrainConfig {
                    k_uniform: 0,
                    uniform_negatives: false,
                    k_hard: 32,
                    beta: 4.0,
                    encoder_lr: 1e-4,
                    ..toy_train_config()
                },
                reader_lr: 3e-2,
            },
        }
    }
}

impl RunConfig for TrainRlmConfig {
    fn set_seed(&mut self, seed: u64) {
        self.task.toy.seed = seed;
        self.rlm.train.seed = seed;
    }
}

impl TrainRlmConfig {
    pub fn resolved_rlm(&self) -> RlmConfig {
        match self.arm {
            Some(arm) => self.rlm.clone().for_arm(arm, self.refresh_every),
            None => self.rlm.clone(),
        }
    }

    pub fn models(&self, task: &RlmTask) -> Result<RlmModels> {
        let d = self.task.toy.dim;
        let mut models = RlmModels::init(
            &MlpSpec::residual(d, self.encoder_depth, self.encoder_width),
            &MlpSpec::residual(d, self.corrector_depth, self.corrector_width),
            self.init_scale,
            d,
            self.task.vocab_size,
            self.rlm.train.seed,
        )?;
        if self.pretrain_steps > 0 {
            let warm = TrainConfig {
                steps: self.pretrain_steps,
                encoder_lr: self.pretrain_lr,
                seed: self.rlm.train.seed,
                eval_every: 0,
                ..toy_train_config()
            }
            .for_arm(Arm::Exhaustive, 100);
            let corrector = models.retriever.corrector.clone();
            let r = train_joint(&task.toy, models.retriever, &warm)?;
            models.retriever = JointModels { corrector, ..r.models };
        }
        Ok(models)
    }
}

impl RunConfig for SweepSpec {
    fn set_seed(&mut self, seed: u64) {
        self.master_seed = seed;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckTheoryConfig {
    pub tv_instances: usize,
    pub synth: SynthConfig,
    pub drift_scales: Vec<f64>,
    pub n_probes: usize,
    pub perturbation_norms: Vec<f64>,
    pub directions: usize,
    pub encoder_depth: usize,
    pub encoder_width: usize,
    pub seed: u64,
}

impl Default for CheckTheoryConfig {
    fn default() -> Self {
        Self {
            tv_instances: 1000,
            synth: SynthConfig {
                n_targets: 1024,
                n_probes: 64,
                ..SynthConfig::default()
            },
            drift_scales: vec![0.0, 0.02, 0.05, 0.2, 0.5],
            n_probes: 64,
            perturbation_norms: vec![0.0, 0.01, 0.02, 0.05, 0.1, 0.2],
            directions: 10,
            encoder_depth: 2,
            encoder_width: 16,
            seed: 0,
        }
    }
}

impl RunConfig for CheckTheoryConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
    }
}

impl RunConfig for SmallLargeConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
    }
}

/// Recall of saved encoders on a regenerated toy task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub toy: RetrievalToyConfig,
    /// Output directory of a `train-joint` or `train-rlm` run.
    pub run_dir: String,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            toy: RetrievalToyConfig::default(),
            run_dir: String::new(),
            ks: RECALL_KS.to_vec(),
        }
    }
}

impl RunConfig for EvalConfig {
    fn set_seed(&mut self, seed: u64) {
        self.toy.seed = seed;
    }
}

fn typed<T: RunConfig>(config: &Value) -> Result<T> {
    serde_json::from_value(config.clone()).map_err(|e| Error::invalid(format!("bad config: {e}")))
}

fn zeroed<T: RunConfig>(config: &Value) -> Result<Value> {
    let mut c: T = typed(config)?;
    c.set_seed(0);
    Ok(serde_json::to_value(c)?)
}

/// Default config of a command, as JSON.
pub fn default_config(command: Command) -> Result<Value> {
    Ok(match command {
        Command::SynthGen => serde_json::to_value(SynthConfig::default())?,
        Command::TrainCorrector => serde_json::to_value(TrainCorrectorConfig::default())?,
        Command::TrainJoint => serde_json::to_value(TrainJointConfig::default())?,
        Command::TrainRlm => serde_json::to_value(TrainRlmConfig::default())?,
        Command::SweepCapacity => serde_json::to_value(SweepSpec::capacity())?,
        Command::SweepFraction => serde_json::to_value(SweepSpec::fraction())?,
        Command::CheckTheory => serde_json::to_value(CheckTheoryConfig::default())?,
        Command::SmallLarge => serde_json::to_value(SmallLargeConfig::default())?,
        Command::Eval => serde_json::to_value(EvalConfig::default())?,
        Command::Report => Value::Object(Default::default()),
    })
}

/// `config` with every seed set to zero, for grouping runs across seeds.
pub fn seedless_config(command: Command, config: &Value) -> Result<Value> {
    match command {
        Command::SynthGen => zeroed::<SynthConfig>(config),
        Command::TrainCorrector => zeroed::<TrainCorrectorConfig>(config),
        Command::TrainJoint => zeroed::<TrainJointConfig>(config),
        Command::TrainRlm => zeroed::<TrainRlmConfig>(config),
        Command::SweepCapacity | Command::SweepFraction => zeroed::<SweepSpec>(config),
        Command::CheckTheory => zeroed::<CheckTheoryConfig>(config),
        Command::SmallLarge => zeroed::<SmallLargeConfig>(config),
        Command::Eval => zeroed::<EvalConfig>(config),
        Command::Report => Ok(config.clone()),
    }
}

/// Output of one command before the manifest is assembled.
pub(crate) struct RunOutput {
    pub config: Value,
    pub config_digest: String,
    pub cell_digest: String,
    pub metrics: Metrics,
}

fn finish<T: RunConfig>(cfg: &T, metrics: Metrics) -> Result<RunOutput> {
    Ok(RunOutput {
        config: serde_json::to_value(cfg)?,
        config_digest: config_digest(cfg)?,
        cell_digest: cfg.cell_digest()?,
        metrics,
    })
}

pub(crate) fn run_command(command: Command, config: &Value, seed: u64, out: &Path) -> Result<RunOutput> {
    fs::create_dir_all(out)?;
    match command {
        Command::SynthGen => {
            let mut cfg: SynthConfig = typed(config)?;
            cfg.set_seed(seed);
            let metrics = run_synth_gen(&cfg, out)?;
            finish(&cfg, metrics)
        }
        Command::TrainCorrector => {
            let mut cfg: TrainCorrectorConfig = typed(config)?;
            cfg.set_seed(seed);
            let metrics = run_train_corrector(&cfg, out)?;
            finish(&cfg, metrics)
        }
        Command::TrainJoint => {
            let mut cfg: TrainJointConfig = typed(config)?;
            cfg.set_seed(seed);
            let metrics = run_train_joint(&cfg, out)?;
            finish(&cfg, metrics)
        }
        Command::TrainRlm => {
            let mut cfg: TrainRlmConfig = typed(config)?;
            cfg.set_seed(seed);
            let metrics = run_train_rlm(&cfg, out)?;
            finish(&cfg, metrics)
        }
        Command::SweepCapacity | Command::SweepFraction => {
            let mut cfg: SweepSpec = typed(config)?;
            cfg.set_seed(seed);
            let metrics = run_sweep_command(&cfg, out)?;
            finish(&cfg, metrics)
        }
        Command::CheckTheory => {
            let mut cfg: CheckTheoryConfig = typed(config)?;
            cfg.set_seed(seed);
            let metrics = run_check_theory(&cfg, out)?;
            finish(&cfg, metrics)
        }
        Command::SmallLarge => {
            let mut cfg: SmallLargeConfig = typed(config)?;
            cfg.set_seed(seed);
            let metrics = run_small_large(&cfg, out)?;
            finish(&cfg, metrics)
        }
        Command::Eval => {
            let mut cfg: EvalConfig = typed(config)?;
            cfg.set_seed(seed);
            let metrics = run_eval(&cfg)?;
            finish(&cfg, metrics)
        }
        Command::Report => Err(Error::invalid("report is not a seeded run")),
    }
}

fn write_net(net: &MlpNet, path: &Path) -> Result<()> {
    net.write_checkpoint(BufWriter::new(File::create(path)?))
}

fn write_buffer(buffer: &TargetBuffer, path: &Path) -> Result<()> {
    buffer.write_checkpoint(BufWriter::new(File::create(path)?))
}

fn run_synth_gen(cfg: &SynthConfig, out: &Path) -> Result<Metrics> {
    let task = SynthTask::generate(cfg)?;
    task.save(&out.join("task"))?;
    Ok(Metrics::from([
        ("staleness_kl".into(), task.staleness_kl),
        ("n_targets".into(), cfg.n_targets as f64),
    ]))
}

fn run_train_corrector(cfg: &TrainCorrectorConfig, out: &Path) -> Result<Metrics> {
    let task = SynthTask::generate(&cfg.synth)?;
    let spec = cfg.corrector_spec();
    let r = train_corrector_isolated(&task, &spec, cfg.sample_fraction, &cfg.isolated)?;
    write_net(&r.corrector, &out.join("corrector.bin"))?;
    let mut csv = csv::Writer::from_path(out.join("losses.csv"))?;
    csv.write_record(["epoch", "loss"])?;
    for (i, l) in r.losses.iter().enumerate() {
        csv.write_record([i.to_string(), l.to_string()])?;
    }
    csv.flush()?;
    Ok(Metrics::from([
        ("kl_corrected".into(), r.kl_corrected),
        ("staleness_kl".into(), r.kl_stale),
        ("epochs".into(), r.epochs as f64),
        ("pool_size".into(), r.pool_size as f64),
        ("best_loss".into(), r.best_loss),
        ("param_count".into(), spec.parameter_count() as f64),
    ]))
}

fn report_metrics(report: &ExperimentReport) -> Metrics {
    let mut m = Metrics::new();
    if let Some(e) = report.final_eval() {
        for &(k, v) in &e.recall {
            m.insert(format!("recall@{k}"), v);
        }
        m.insert("kl_stale".into(), e.kl_stale);
        if let Some(v) = e.kl_corrected {
            m.insert("kl_corrected".into(), v);
        }
        if let Some(v) = e.accuracy {
            m.insert("accuracy".into(), v);
        }
        m.insert("staleness_l1".into(), e.staleness_l1);
    }
    if let Some(s) = report.steps.last() {
        m.insert("final_task_loss".into(), s.task_loss);
    }
    m.insert("reembed_counter".into(), report.reembed_counter as f64);
    m.insert("fresh_rows_encoded".into(), report.fresh_rows_encoded as f64);
    m
}

fn write_report_files(report: &ExperimentReport, out: &Path) -> Result<()> {
    report.write_jsonl(BufWriter::new(File::create(out.join("report.jsonl"))?))?;
    let mut csv = csv::Writer::from_path(out.join("summary.csv"))?;
    csv.write_record(ExperimentReport::CSV_HEADER)?;
    csv.write_record(report.csv_row())?;
    csv.flush()?;
    Ok(())
}

fn run_train_joint(cfg: &TrainJointConfig, out: &Path) -> Result<Metrics> {
    let toy = gen_retrieval_toy(&cfg.toy)?;
    let r = train_joint(&toy, cfg.models()?, &cfg.resolved_train())?;
    write_report_files(&r.report, out)?;
    write_net(&r.models.f, &out.join("f.bin"))?;
    write_net(&r.models.g, &out.join("g.bin"))?;
    write_net(&r.models.corrector, &out.join("h.bin"))?;
    write_buffer(&r.buffer, &out.join("buffer.bin"))?;
    Ok(report_metrics(&r.report))
}

fn run_train_rlm(cfg: &TrainRlmConfig, out: &Path) -> Result<Metrics> {
    let task = RlmTask::generate(&cfg.task)?;
    let r = train_rlm(&task, cfg.models(&task)?, &cfg.resolved_rlm())?;
    write_report_files(&r.report, out)?;
    write_net(&r.models.retriever.f, &out.join("f.bin"))?;
    write_net(&r.models.retriever.g, &out.join("g.bin"))?;
    write_net(&r.models.retriever.corrector, &out.join("h.bin"))?;
    write_net(&r.models.reader, &out.join("reader.bin"))?;
    write_buffer(&r.buffer, &out.join("buffer.bin"))?;
    Ok(report_metrics(&r.report))
}

fn run_sweep_command(spec: &SweepSpec, out: &Path) -> Result<Metrics> {
    let results = run_sweep(spec)?;
    write_sweep_csv(BufWriter::new(File::create(out.join(SWEEP_CSV))?), &results)?;
    write_sweep_jsonl(BufWriter::new(File::create(out.join(SWEEP_JSONL))?), &results)?;
    let failed = results.iter().filter(|r| !r.ok()).count();
    Ok(Metrics::from([
        ("n_cells".into(), results.len() as f64),
        ("n_failed".into(), failed as f64),
    ]))
}

fn write_bound_records(path: &Path, label: &str, recs: &[(String, BoundCheckRecord)]) -> Result<()> {
    let mut csv = csv::Writer::from_path(path)?;
    csv.write_record([label, "seed", "lhs", "rhs", "slack", "pass"])?;
    for (tag, r) in recs {
        csv.write_record([
            tag.clone(),
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
            r.lhs.to_string(),
            r.rhs.to_string(),
            r.slack.to_string(),
            r.pass.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

fn run_check_theory(cfg: &CheckTheoryConfig, out: &Path) -> Result<Metrics> {
    let tv = softmax_tv_sweep(cfg.tv_instances, cfg.seed)?;
    let tv_pass = tv.iter().filter(|r| r.pass).count() as f64 / tv.len().max(1) as f64;
    let tagged: Vec<(String, BoundCheckRecord)> = tv.into_iter().map(|r| ("logit".to_string(), r)).collect();
    write_bound_records(&out.join("tv_bound.csv"), "level", &tagged)?;

    let mut gap_rows = Vec::new();
    let mut csv = csv::Writer::from_path(out.join("risk_gap.csv"))?;
    csv.write_record(["drift_scale", "loss", "staleness_kl", "risk_true", "risk_stale", "gap", "tv", "pass_fraction"])?;
    for &scale in &cfg.drift_scales {
        let task = SynthTask::generate(&SynthConfig {
            drift_variance_scale: scale,
            ..cfg.synth.clone()
        })?;
        for (name, loss) in [("mse", BoundedLoss::Mse), ("ce_pointwise", BoundedLoss::CePointwise)] {
            let r = check_risk_gap(&task, None, loss, cfg.n_probes)?;
            let pass = r.per_probe.iter().filter(|p| p.pass).count() as f64 / r.per_probe.len() as f64;
            csv.write_record([
                scale.to_string(),
                name.to_string(),
                task.staleness_kl.to_string(),
                r.risk_true.to_string(),
                r.risk_stale.to_string(),
                r.gap.to_string(),
                r.tv.to_string(),
                pass.to_string(),
            ])?;
            gap_rows.extend(r.per_probe);
        }
    }
    csv.flush()?;
    let risk_pass = gap_rows.iter().filter(|r| r.pass).count() as f64 / gap_rows.len().max(1) as f64;

    let base = SynthTask::generate(&SynthConfig {
        drift_variance_scale: 0.0,
        ..cfg.synth.clone()
    })?;
    let g = MlpNet::init(
        MlpSpec::residual(cfg.synth.dim, cfg.encoder_depth, cfg.encoder_width),
        InitMode::HeNormal,
        &mut Rng::new(cfg.seed).derive(51),
    )?;
    let mut csv = csv::Writer::from_path(out.join("perturbation.csv"))?;
    csv.write_record(["direction", "norm", "l1_gap", "tv"])?;
    let mut ls = Vec::new();
    let mut slopes = Vec::new();
    for dir in 0..cfg.directions as u64 {
        let s = staleness_perturbation_sweep(
            &g,
            &cfg.perturbation_norms,
            &base.stale,
            &base.queries,
            cfg.synth.beta,
            Rng::new(cfg.seed).derive(52 + dir).next_u64(),
        )?;
        for row in &s.rows {
            csv.write_record([dir.to_string(), row.norm.to_string(), row.l1_gap.to_string(), row.tv.to_string()])?;
        }
        ls.push(s.lipschitz_estimate);
        slopes.push(s.tv_slope);
    }
    csv.flush()?;
    let mut m = Metrics::from([
        ("tv_pass_fraction".into(), tv_pass),
        ("risk_gap_pass_fraction".into(), risk_pass),
    ]);
    if let Some(v) = crate::numkernel::median(&ls) {
        m.insert("lipschitz_median".into(), v);
    }
    if let Some(v) = coefficient_of_variation(&ls) {
        m.insert("lipschitz_cv".into(), v);
    }
    if let Some(v) = crate::numkernel::median(&slopes) {
        m.insert("tv_slope_median".into(), v);
    }
    Ok(m)
}

fn run_small_large(cfg: &SmallLargeConfig, out: &Path) -> Result<Metrics> {
    let rows = small_approximates_large(cfg)?;
    let mut csv = csv::Writer::from_path(out.join("precision.csv"))?;
    csv.write_record(["k", "uncorrected", "corrected"])?;
    let mut m = Metrics::new();
    for r in &rows {
        csv.write_record([r.k.to_string(), r.uncorrected.to_string(), r.corrected.to_string()])?;
        m.insert(format!("precision@{}_uncorrected", r.k), r.uncorrected);
        m.insert(format!("precision@{}_corrected", r.k), r.corrected);
    }
    csv.flush()?;
    Ok(m)
}

fn read_net(path: &Path) -> Result<MlpNet> {
    MlpNet::read_checkpoint(std::io::BufReader::new(File::open(path)?), true)
}

fn run_eval(cfg: &EvalConfig) -> Result<Metrics> {
    if cfg.run_dir.is_empty() {
        return Err(Error::invalid("eval needs `run_dir`"));
    }
    let dir = Path::new(&cfg.run_dir);
    let f = read_net(&dir.join("f.bin"))?;
    let g = read_net(&dir.join("g.bin"))?;
    let toy = gen_retrieval_toy(&cfg.toy)?;
    let recall = evaluate_recall(&f, &g, &toy.eval_queries, &toy.targets_raw, &toy.eval_labels, &cfg.ks)?;
    Ok(recall.into_iter().map(|(k, v)| (format!("recall@{k}"), v)).collect())
}

/// Refresh policy as a short label, for logs.
pub fn policy_label(p: BufferPolicy) -> String {
    match p {
        BufferPolicy::Never => "never".into(),
        BufferPolicy::EveryRSteps(r) => format!("every_{r}"),
    }
}
