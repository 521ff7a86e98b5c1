//! Synthetic targets, drift maps, toy retrieval and answer tasks.
//!
//! Every generator is a pure function of its config and seed. Sub-streams
//! are derived from the seed by fixed labels so adding draws to one stage
//! never shifts another.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config_digest;
use crate::net::{InitMode, MlpNet, MlpSpec};
use crate::numkernel::{self, EmbeddingMatrix, Rng};
use crate::softmax_approx::mean_full_kl;

const STREAM_TARGETS: u64 = 1;
const STREAM_DRIFT: u64 = 2;
const STREAM_PROBES: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_targets: usize,
    pub dim: usize,
    pub n_mixture_components: usize,
    pub sigma_means: f64,
    pub sigma_comp: f64,
    pub drift_depth: usize,
    pub drift_width: usize,
    /// Multiplier on the drift net's final-layer init variance.
    pub drift_variance_scale: f64,
    pub beta: f64,
    /// Queries are mixture draws shrunk by this factor.
    pub query_scale: f64,
    pub n_probes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_targets: 4096,
            dim: 8,
            n_mixture_components: 20,
            sigma_means: 3.0,
            sigma_comp: 1.0,
            drift_depth: 2,
            drift_width: 8,
            drift_variance_scale: 0.2,
            beta: 20.0,
            query_scale: 0.1,
            n_probes: 256,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_targets == 0 || self.dim == 0 || self.n_mixture_components == 0 || self.n_probes == 0 {
            return Err(Error::invalid("synth counts must be at least 1"));
        }
        if self.drift_depth > 0 && self.drift_width == 0 {
            return Err(Error::invalid("drift width must be at least 1"));
        }
        for (name, v) in [
            ("sigma_means", self.sigma_means),
            ("sigma_comp", self.sigma_comp),
            ("drift_variance_scale", self.drift_variance_scale),
            ("query_scale", self.query_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn drift_spec(&self) -> MlpSpec {
        MlpSpec::residual(self.dim, self.drift_depth, self.drift_width)
    }
}

/// Equal-weight isotropic Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub means: EmbeddingMatrix,
    pub sigma_comp: f64,
}

impl Mixture {
    pub fn random(components: usize, dim: usize, sigma_means: f64, sigma_comp: f64, rng: &mut Rng) -> Self {
        let data = (0..components * dim).map(|_| sigma_means * rng.normal()).collect();
        Self {
            means: EmbeddingMatrix::from_raw(components, dim, data),
            sigma_comp,
        }
    }

    /// `m` draws and the component each came from.
    pub fn sample(&self, m: usize, rng: &mut Rng) -> (EmbeddingMatrix, Vec<usize>) {
        let d = self.means.dim();
        let mut data = Vec::with_capacity(m * d);
        let mut comps = Vec::with_capacity(m);
        for _ in 0..m {
            let c = rng.below(self.means.rows());
            comps.push(c);
            data.extend(self.means.row(c).iter().map(|&mu| mu + self.sigma_comp * rng.normal()));
        }
        (EmbeddingMatrix::from_raw(m, d, data), comps)
    }

    /// Draws scaled by `scale`, used as query vectors.
    pub fn sample_scaled(&self, m: usize, scale: f64, rng: &mut Rng) -> EmbeddingMatrix {
        let (pts, _) = self.sample(m, rng);
        let data = pts.into_data().into_iter().map(|v| v * scale).collect();
        EmbeddingMatrix::from_raw(m, self.means.dim(), data)
    }
}

/// Stale target cloud `g'(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCloud {
    pub mixture: Mixture,
    pub points: EmbeddingMatrix,
    pub components: Vec<usize>,
}

pub fn gen_targets(config: &SynthConfig) -> Result<TargetCloud> {
    config.validate()?;
    let mut rng = Rng::new(config.seed).derive(STREAM_TARGETS);
    let mixture = Mixture::random(
        config.n_mixture_components,
        config.dim,
        config.sigma_means,
        config.sigma_comp,
        &mut rng,
    );
    let (points, components) = mixture.sample(config.n_targets, &mut rng);
    Ok(TargetCloud {
        mixture,
        points,
        components,
    })
}

/// Probe queries for staleness and corrector evaluation.
pub fn gen_probes(config: &SynthConfig, mixture: &Mixture) -> EmbeddingMatrix {
    let mut rng = Rng::new(config.seed).derive(STREAM_PROBES);
    mixture.sample_scaled(config.n_probes, config.query_scale, &mut rng)
}

#[derive(Debug, Clone)]
pub struct Drift {
    pub net: MlpNet,
    pub truth: EmbeddingMatrix,
    /// Mean over probes of `KL(P || P_{g'})`.
    pub staleness_kl: f64,
}

/// Random residual drift `g = drift(g')`.
pub fn gen_drift(config: &SynthConfig, stale: &EmbeddingMatrix, probes: &EmbeddingMatrix) -> Result<Drift> {
    config.validate()?;
    let mut rng = Rng::new(config.seed).derive(STREAM_DRIFT);
    let net = MlpNet::init_scaled(
        config.drift_spec(),
        InitMode::HeNormal,
        config.drift_variance_scale,
        &mut rng,
    )?;
    let truth = net.predict(stale)?;
    let staleness_kl = mean_full_kl(probes, &truth, stale, config.beta)?;
    Ok(Drift {
        net,
        truth,
        staleness_kl,
    })
}

/// Stale and fresh target tables with probe queries.
#[derive(Debug, Clone)]
pub struct SynthTask {
    pub config: SynthConfig,
    pub mixture: Mixture,
    /// Probe queries `f(x)`.
    pub queries: EmbeddingMatrix,
    pub stale: EmbeddingMatrix,
    pub truth: EmbeddingMatrix,
    pub staleness_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub config: SynthConfig,
    pub config_digest: String,
    pub staleness_kl: f64,
    pub matrices: Vec<MatrixEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub dim: usize,
}

impl SynthTask {
    pub fn generate(config: &SynthConfig) -> Result<Self> {
        let cloud = gen_targets(config)?;
        let probes = gen_probes(config, &cloud.mixture);
        let drift = gen_drift(config, &cloud.points, &probes)?;
        Ok(Self {
            config: config.clone(),
            mixture: cloud.mixture,
            queries: probes,
            stale: cloud.points,
            truth: drift.truth,
            staleness_kl: drift.staleness_kl,
        })
    }

    /// Fresh training queries from the query distribution.
    pub fn sample_queries(&self, m: usize, rng: &mut Rng) -> EmbeddingMatrix {
        self.mixture.sample_scaled(m, self.config.query_scale, rng)
    }

    fn named(&self) -> [(&'static str, &EmbeddingMatrix); 4] {
        [
            ("stale", &self.stale),
            ("true", &self.truth),
            ("probes", &self.queries),
            ("means", &self.mixture.means),
        ]
    }

    /// Writes one matrix file per table plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<TaskManifest> {
        fs::create_dir_all(dir)?;
        let mut matrices = Vec::new();
        for (name, m) in self.named() {
            let file = format!("{name}.bin");
            m.write_checkpoint(std::io::BufWriter::new(fs::File::create(dir.join(&file))?))?;
            matrices.push(MatrixEntry {
                name: name.to_string(),
                file,
                rows: m.rows(),
                dim: m.dim(),
            });
        }
        let manifest = TaskManifest {
            config: self.config.clone(),
            config_digest: config_digest(&self.config)?,
            staleness_kl: self.staleness_kl,
            matrices,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: TaskManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if config_digest(&manifest.config)? != manifest.config_digest {
            return Err(Error::Format("task manifest digest does not match its config".into()));
        }
        let read = |name: &str| -> Result<EmbeddingMatrix> {
            let e = manifest
                .matrices
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Format(format!("manifest lists no {name} matrix")))?;
            let m = EmbeddingMatrix::read_checkpoint(std::io::BufReader::new(fs::File::open(dir.join(&e.file))?))?;
            if m.shape() != (e.rows, e.dim) {
                return Err(Error::Format(format!("{name} shape differs from manifest")));
            }
            Ok(m)
        };
        Ok(Self {
            mixture: Mixture {
                means: read("means")?,
                sigma_comp: manifest.config.sigma_comp,
            },
            queries: read("probes")?,
            stale: read("stale")?,
            truth: read("true")?,
            staleness_kl: manifest.staleness_kl,
            config: manifest.config,
        })
    }
}

/// Queries placed at their labeled target plus isotropic noise. Labels are
/// uniform over targets.
pub fn gen_queries(
    targets: &EmbeddingMatrix,
    m: usize,
    label_noise: f64,
    rng: &mut Rng,
) -> Result<(EmbeddingMatrix, Vec<usize>)> {
    if m == 0 {
        return Err(Error::invalid("need at least one query"));
    }
    if targets.rows() == 0 {
        return Err(Error::Empty("targets"));
    }
    let d = targets.dim();
    let mut data = Vec::with_capacity(m * d);
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        let y = rng.below(targets.rows());
        labels.push(y);
        data.extend(targets.row(y).iter().map(|&t| t + label_noise * rng.normal()));
    }
    Ok((EmbeddingMatrix::new(m, d, data)?, labels))
}

/// How true targets on the unit circle move away from the stale ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircleProfile {
    /// Every point rotated by the same angle.
    Rotation(f64),
    /// `theta + amplitude * sin(frequency * theta)`.
    Warp { amplitude: f64, frequency: f64 },
}

impl CircleProfile {
    fn apply(&self, theta: f64) -> f64 {
        match *self {
            CircleProfile::Rotation(a) => theta + a,
            CircleProfile::Warp { amplitude, frequency } => theta + amplitude * (frequency * theta).sin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircleToy {
    pub angles: Vec<f64>,
    pub stale: EmbeddingMatrix,
    pub truth: EmbeddingMatrix,
    pub probes: EmbeddingMatrix,
}

fn unit(theta: f64) -> [f64; 2] {
    [theta.cos(), theta.sin()]
}

/// Targets at uniform random angles on the unit circle, with probes drawn
/// the same way.
pub fn gen_unit_circle_toy(n_targets: usize, profile: CircleProfile, n_probes: usize, rng: &mut Rng) -> Result<CircleToy> {
    if n_targets < 2 {
        return Err(Error::invalid("circle toy needs at least two targets"));
    }
    let angles: Vec<f64> = (0..n_targets).map(|_| TAU * rng.uniform()).collect();
    let stale: Vec<[f64; 2]> = angles.iter().map(|&t| unit(t)).collect();
    let truth: Vec<[f64; 2]> = angles.iter().map(|&t| unit(profile.apply(t))).collect();
    let probes: Vec<[f64; 2]> = (0..n_probes.max(1)).map(|_| unit(TAU * rng.uniform())).collect();
    Ok(CircleToy {
        angles,
        stale: EmbeddingMatrix::from_rows(&stale)?,
        truth: EmbeddingMatrix::from_rows(&truth)?,
        probes: EmbeddingMatrix::from_rows(&probes)?,
    })
}

impl CircleToy {
    /// Mean `KL(P || P_{g'})` over the probes.
    pub fn staleness_kl(&self, beta: f64) -> Result<f64> {
        mean_full_kl(&self.probes, &self.truth, &self.stale, beta)
    }
}

/// Ground-truth answer model `log P*(a | x, y) = <w_a, [x ; y]> + const`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerModel {
    /// `vocab x (2 D)`.
    pub weights: EmbeddingMatrix,
}

impl AnswerModel {
    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn logits(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let d = x.len();
        self.weights
            .iter_rows()
            .map(|w| numkernel::dot(&w[..d], x) + numkernel::dot(&w[d..], y))
            .collect()
    }

    pub fn probs(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        numkernel::softmax(&self.logits(x, y), 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlmAnswers {
    pub model: AnswerModel,
    /// One sampled answer per query.
    pub answers: Vec<usize>,
    /// `argmax_a P*(a | x, y_label)` per query.
    pub gold: Vec<usize>,
}

/// Samples answers for labeled queries. `query_weight` and `target_weight`
/// scale the two halves of each answer vector.
pub fn gen_rlm_answers(
    queries: &EmbeddingMatrix,
    targets: &EmbeddingMatrix,
    labels: &[usize],
    vocab_size: usize,
    query_weight: f64,
    target_weight: f64,
    rng: &mut Rng,
) -> Result<RlmAnswers> {
    if vocab_size < 2 {
        return Err(Error::invalid(format!("vocab_size must be at least 2, got {vocab_size}")));
    }
    let d = queries.dim();
    let mut w = Vec::with_capacity(vocab_size * 2 * d);
    for _ in 0..vocab_size {
        w.extend((0..d).map(|_| query_weight * rng.normal()));
        w.extend((0..d).map(|_| target_weight * rng.normal()));
    }
    let model = AnswerModel {
        weights: EmbeddingMatrix::new(vocab_size, 2 * d, w)?,
    };
    sample_answers(model, queries, targets, labels, rng)
}

/// Draws one answer per labeled query from `model`.
pub fn sample_answers(
    model: AnswerModel,
    queries: &EmbeddingMatrix,
    targets: &EmbeddingMatrix,
    labels: &[usize],
    rng: &mut Rng,
) -> Result<RlmAnswers> {
    if labels.len() != queries.rows() {
        return Err(Error::shape(format!(
            "{} labels for {} queries",
            labels.len(),
            queries.rows()
        )));
    }
    if model.weights.dim() != queries.dim() + targets.dim() {
        return Err(Error::shape("answer weights do not match query and target dims"));
    }
    let mut answers = Vec::with_capacity(labels.len());
    let mut gold = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        if y >= targets.rows() {
            return Err(Error::OutOfRange {
                index: y,
                len: targets.rows(),
            });
        }
        let p = model.probs(queries.row(i), targets.row(y))?;
        gold.push(numkernel::argmax(&p).expect("vocab is non-empty"));
        answers.push(numkernel::categorical_sample(&p, rng)?);
    }
    Ok(RlmAnswers { model, answers, gold })
}

/// Configuration of the toy retrieval task used by the joint and RLM
/// trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalToyConfig {
    pub n_targets: usize,
    pub dim: usize,
    pub n_mixture_components: usize,
    pub sigma_means: f64,
    pub sigma_comp: f64,
    /// Raw targets are projected onto a sphere of this radius.
    pub radius: f64,
    pub n_train_queries: usize,
    pub n_eval_queries: usize,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for RetrievalToyConfig {
    fn default() -> Self {
        Self {
            n_targets: 4096,
            dim: 8,
            n_mixture_components: 20,
            sigma_means: 3.0,
            sigma_comp: 1.0,
            radius: 3.0,
            n_train_queries: 2048,
            n_eval_queries: 512,
            label_noise: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalToy {
    pub config: RetrievalToyConfig,
    pub targets_raw: EmbeddingMatrix,
    pub train_queries: EmbeddingMatrix,
    pub train_labels: Vec<usize>,
    pub eval_queries: EmbeddingMatrix,
    pub eval_labels: Vec<usize>,
}

pub fn gen_retrieval_toy(config: &RetrievalToyConfig) -> Result<RetrievalToy> {
    if config.n_targets == 0 || config.dim == 0 || config.n_train_queries == 0 || config.n_eval_queries == 0 {
        return Err(Error::invalid("retrieval toy counts must be at least 1"));
    }
    let root = Rng::new(config.seed);
    let mut rng = root.derive(STREAM_TARGETS);
    let mixture = Mixture::random(
        config.n_mixture_components.max(1),
        config.dim,
        config.sigma_means,
        config.sigma_comp,
        &mut rng,
    );
    let (pts, _) = mixture.sample(config.n_targets, &mut rng);
    let mut data = pts.into_data();
    for row in data.chunks_exact_mut(config.dim) {
        let norm = numkernel::dot(row, row).sqrt().max(f64::MIN_POSITIVE);
        row.iter_mut().for_each(|v| *v *= config.radius / norm);
    }
    let targets_raw = EmbeddingMatrix::new(config.n_targets, config.dim, data)?;
    let mut qrng = root.derive(STREAM_PROBES);
    let (train_queries, train_labels) = gen_queries(&targets_raw, config.n_train_queries, config.label_noise, &mut qrng)?;
    let (eval_queries, eval_labels) = gen_queries(&targets_raw, config.n_eval_queries, config.label_noise, &mut qrng)?;
    Ok(RetrievalToy {
        config: config.clone(),
        targets_raw,
        train_queries,
        train_labels,
        eval_queries,
        eval_labels,
    })
}

const STREAM_ANSWERS: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlmTaskConfig {
    pub toy: RetrievalToyConfig,
    pub vocab_size: usize,
    pub query_weight: f64,
    pub target_weight: f64,
}

impl Default for RlmTaskConfig {
    fn default() -> Self {
        Self {
            toy: RetrievalToyConfig::default(),
            vocab_size: 16,
            query_weight: 0.2,
            target_weight: 1.0,
        }
    }
}

/// Retrieval toy plus a fixed answer model: sampled answers for the
/// training queries, gold answers for the eval queries.
///
/// Each target carries a content vector drawn independently of its raw
/// position. Answers depend on the content of the labeled target, so the
/// query alone does not reveal them.
#[derive(Debug, Clone, PartialEq)]
pub struct RlmTask {
    pub config: RlmTaskConfig,
    pub toy: RetrievalToy,
    /// `n_targets x dim`, standard normal.
    pub contents: EmbeddingMatrix,
    pub model: AnswerModel,
    pub train_answers: Vec<usize>,
    pub eval_gold: Vec<usize>,
}

impl RlmTask {
    pub fn generate(config: &RlmTaskConfig) -> Result<Self> {
        let toy = gen_retrieval_toy(&config.toy)?;
        let mut rng = Rng::new(config.toy.seed).derive(STREAM_ANSWERS);
        let (n, d) = (toy.targets_raw.rows(), toy.targets_raw.dim());
        let contents = EmbeddingMatrix::new(n, d, (0..n * d).map(|_| rng.normal()).collect())?;
        let train = gen_rlm_answers(
            &toy.train_queries,
            &contents,
            &toy.train_labels,
            config.vocab_size,
            config.query_weight,
            config.target_weight,
            &mut rng,
        )?;
        let eval = sample_answers(train.model.clone(), &toy.eval_queries, &contents, &toy.eval_labels, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            contents,
            model: train.model,
            train_answers: train.answers,
            eval_gold: eval.gold,
            toy,
        })
    }
}
