//! Correcting a small encoder toward a large one and measuring how well
//! their nearest-neighbor sets agree.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{InitMode, MlpNet, MlpSpec};
use crate::numkernel::{self, EmbeddingMatrix, Rng};
use crate::optim::{adam_step, AdamState};
use crate::softmax_approx::{corrector_loss_ce, select_from_scores, truncated_from_rows, SubsetMode};
use crate::synth::{gen_probes, gen_targets, SynthConfig};

const STREAM_LARGE: u64 = 41;
const STREAM_SMALL: u64 = 42;
const STREAM_CORRECTOR: u64 = 43;
const STREAM_STEPS: u64 = 44;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmallLargeConfig {
    /// Raw targets, probe queries and the query distribution.
    pub synth: SynthConfig,
    pub large_depth: usize,
    pub large_width: usize,
    pub small_depth: usize,
    pub small_width: usize,
    /// Final-layer variance scale of both encoders.
    pub encoder_init_scale: f64,
    pub corrector_depth: usize,
    pub corrector_width: usize,
    /// Targets scored per training query: half top-scoring under the
    /// corrected small encoder, half uniform.
    pub samples_per_query: usize,
    pub query_batch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub ks: Vec<usize>,
    pub seed: u64,
}

impl Default for SmallLargeConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig {
                n_targets: 2048,
                ..SynthConfig::default()
            },
            large_depth: 2,
            large_width: 64,
            small_depth: 1,
            small_width: 8,
            encoder_init_scale: 0.5,
            corrector_depth: 2,
            corrector_width: 64,
            samples_per_query: 32,
            query_batch: 32,
            steps: 500,
            learning_rate: 0.01,
            ks: vec![10, 20, 100],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborPrecision {
    pub k: usize,
    pub uncorrected: f64,
    pub corrected: f64,
}

/// Mean over queries of `|top_k(a) ∩ top_k(b)| / k`.
pub fn neighbor_precision(queries: &EmbeddingMatrix, a: &EmbeddingMatrix, b: &EmbeddingMatrix, k: usize) -> Result<f64> {
    if queries.rows() == 0 {
        return Err(Error::Empty("queries"));
    }
    let mut acc = 0.0;
    for q in queries.iter_rows() {
        let mut ta = numkernel::top_k(&numkernel::scores_for(q, a)?, k)?;
        let mut tb = numkernel::top_k(&numkernel::scores_for(q, b)?, k)?;
        ta.sort_unstable();
        tb.sort_unstable();
        let shared = ta.iter().filter(|i| tb.binary_search(i).is_ok()).count();
        acc += shared as f64 / k as f64;
    }
    Ok(acc / queries.rows() as f64)
}

/// Embeds the raw targets with two random encoders, trains a corrector on
/// the small encoder's table, and reports neighbor precision against the
/// large encoder on the probe queries.
pub fn small_approximates_large(config: &SmallLargeConfig) -> Result<Vec<NeighborPrecision>> {
    let s = &config.synth;
    let cloud = gen_targets(s)?;
    let probes = gen_probes(s, &cloud.mixture);
    let root = Rng::new(config.seed);
    let large = MlpNet::init_scaled(
        MlpSpec::residual(s.dim, config.large_depth, config.large_width),
        InitMode::HeNormal,
        config.encoder_init_scale,
        &mut root.derive(STREAM_LARGE),
    )?;
    let small = MlpNet::init_scaled(
        MlpSpec::residual(s.dim, config.small_depth, config.small_width),
        InitMode::HeNormal,
        config.encoder_init_scale,
        &mut root.derive(STREAM_SMALL),
    )?;
    let truth = large.predict(&cloud.points)?;
    let stale = small.predict(&cloud.points)?;
    let h = train_on_samples(config, &cloud.mixture, &truth, &stale, &root)?;
    let corrected = h.predict(&stale)?;
    config
        .ks
        .iter()
        .map(|&k| {
            Ok(NeighborPrecision {
                k,
                uncorrected: neighbor_precision(&probes, &truth, &stale, k)?,
                corrected: neighbor_precision(&probes, &truth, &corrected, k)?,
            })
        })
        .collect()
}

fn train_on_samples(
    config: &SmallLargeConfig,
    mixture: &crate::synth::Mixture,
    truth: &EmbeddingMatrix,
    stale: &EmbeddingMatrix,
    root: &Rng,
) -> Result<MlpNet> {
    let s = &config.synth;
    let n = truth.rows();
    let per_query = config.samples_per_query.min(n);
    if per_query == 0 || config.query_batch == 0 {
        return Err(Error::invalid("samples_per_query and query_batch must be at least 1"));
    }
    let k_hard = per_query / 2;
    let k_uniform = per_query - k_hard;
    let spec = MlpSpec::residual(s.dim, config.corrector_depth, config.corrector_width);
    let mut h = MlpNet::init(spec, InitMode::ZeroResidual, &mut root.derive(STREAM_CORRECTOR))?;
    let mut adam = AdamState::new(config.learning_rate);
    let mut rng = root.derive(STREAM_STEPS);
    let d = s.dim;
    for _ in 0..config.steps {
        let queries = mixture.sample_scaled(config.query_batch, s.query_scale, &mut rng);
        let approx = h.predict(stale)?;
        let subsets: Vec<Vec<usize>> = queries
            .iter_rows()
            .map(|q| {
                let scores = numkernel::scores_for(q, &approx)?;
                select_from_scores(&scores, s.beta, k_hard, k_uniform, SubsetMode::TopK, None, &mut rng)
            })
            .collect::<Result<_>>()?;
        let mut union: Vec<usize> = subsets.iter().flatten().copied().collect();
        union.sort_unstable();
        union.dedup();
        let (h_u, cache) = h.forward(&stale.select_rows(&union)?)?;
        let g_u = truth.select_rows(&union)?;
        let mut grad = vec![0.0; union.len() * d];
        let inv = 1.0 / config.query_batch as f64;
        for (i, (q, sub)) in queries.iter_rows().zip(&subsets).enumerate() {
            let idx: Vec<usize> = sub.iter().map(|y| union.binary_search(y).expect("in union")).collect();
            let pt = truncated_from_rows(i, q, sub, &g_u.select_rows(&idx)?, s.beta)?;
            let h_rows = h_u.select_rows(&idx)?;
            let ph = truncated_from_rows(i, q, sub, &h_rows, s.beta)?;
            let l = corrector_loss_ce(&pt, &ph, q, &h_rows)?;
            for (j, &u) in idx.iter().enumerate() {
                for (a, b) in grad[u * d..(u + 1) * d].iter_mut().zip(l.grad_rows.row(j)) {
                    *a += b * inv;
                }
            }
        }
        h.backward(&cache, &EmbeddingMatrix::new(union.len(), d, grad)?)?;
        adam_step(&mut h, &mut adam)?;
    }
    Ok(h)
}
