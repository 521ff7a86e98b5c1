//! Grid sweeps over isolated corrector training.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::MlpSpec;
use crate::numkernel::Rng;
use crate::synth::{SynthConfig, SynthTask};
use crate::trainer::{train_corrector_isolated, IsolatedConfig};

use super::runs::{RunConfig, TrainCorrectorConfig};
use super::config_digest;

/// Axes of an isolated-training grid. Every `(drift, depth, width,
/// fraction)` cell runs once per replicate; depth 0 has no hidden layer so
/// it appears once regardless of `widths`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub synth: SynthConfig,
    pub isolated: IsolatedConfig,
    pub drift_scales: Vec<f64>,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub fractions: Vec<f64>,
    pub seeds: usize,
    pub master_seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self::capacity()
    }
}

impl SweepSpec {
    /// Widths `{D, 2D, 4D, 8D}` by depths `{0, 1, 2}` on a zero, low and
    /// high drift task, all targets available.
    pub fn capacity() -> Self {
        let synth = SynthConfig::default();
        let d = synth.dim;
        Self {
            drift_scales: vec![0.0, 0.05, 0.2],
            depths: vec![0, 1, 2],
            widths: vec![d, 2 * d, 4 * d, 8 * d],
            fractions: vec![1.0],
            seeds: 10,
            master_seed: 0,
            isolated: IsolatedConfig::default(),
            synth,
        }
    }

    /// Two-layer correctors of every width on the low and high drift tasks,
    /// trained on 1%, 10% and all of the targets.
    pub fn fraction() -> Self {
        Self {
            drift_scales: vec![0.05, 0.2],
            depths: vec![2],
            fractions: vec![0.01, 0.1, 1.0],
            ..Self::capacity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.drift_scales.is_empty() || self.depths.is_empty() || self.fractions.is_empty() || self.seeds == 0 {
            return Err(Error::invalid("every sweep axis needs at least one value"));
        }
        if self.depths.iter().any(|&d| d > 0) && (self.widths.is_empty() || self.widths.contains(&0)) {
            return Err(Error::invalid("widths must be non-empty and positive"));
        }
        if self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::invalid("sample fractions must lie in (0, 1]"));
        }
        if self.drift_scales.iter().any(|&s| !(s.is_finite() && s >= 0.0)) {
            return Err(Error::invalid("drift scales must be finite and non-negative"));
        }
        Ok(())
    }

    /// Seed shared by all cells of one replicate, so cells differing only in
    /// a swept axis see the same task and streams.
    pub fn replicate_seed(&self, replicate: usize) -> u64 {
        Rng::new(self.master_seed).derive(replicate as u64).next_u64()
    }

    pub fn cells(&self) -> Vec<SweepCell> {
        let mut cells = Vec::new();
        for &drift_scale in &self.drift_scales {
            for &depth in &self.depths {
                let widths: &[usize] = if depth == 0 { &[0] } else { &self.widths };
                for &width in widths {
                    for &fraction in &self.fractions {
                        for replicate in 0..self.seeds {
                            let mut config = TrainCorrectorConfig {
                                synth: SynthConfig {
                                    drift_variance_scale: drift_scale,
                                    ..self.synth.clone()
                                },
                                isolated: self.isolated.clone(),
                                depth,
                                width,
                                sample_fraction: fraction,
                            };
                            config.set_seed(self.replicate_seed(replicate));
                            cells.push(SweepCell {
                                index: cells.len(),
                                replicate,
                                config,
                            });
                        }
                    }
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub replicate: usize,
    pub config: TrainCorrectorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: SweepCell,
    pub config_digest: String,
    pub cell_digest: String,
    pub param_count: usize,
    pub staleness_kl: f64,
    pub kl_corrected: f64,
    pub epochs: usize,
    /// `None` on success.
    pub error: Option<String>,
}

impl CellResult {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("param_count", self.param_count as f64),
            ("staleness_kl", self.staleness_kl),
            ("kl_corrected", self.kl_corrected),
            ("epochs", self.epochs as f64),
        ]
    }
}

impl TrainCorrectorConfig {
    pub fn corrector_spec(&self) -> MlpSpec {
        MlpSpec::residual(self.synth.dim, self.depth, self.width)
    }
}

/// Runs every cell. A failing cell is recorded and the sweep continues.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<CellResult>> {
    spec.validate()?;
    let mut tasks: HashMap<String, std::result::Result<SynthTask, String>> = HashMap::new();
    let mut out = Vec::new();
    for cell in spec.cells() {
        let key = config_digest(&cell.config.synth)?;
        let task = tasks
            .entry(key)
            .or_insert_with(|| SynthTask::generate(&cell.config.synth).map_err(|e| e.to_string()));
        let config_digest = config_digest(&cell.config)?;
        let cell_digest = cell.config.cell_digest()?;
        let param_count = cell.config.corrector_spec().parameter_count();
        let run = match task {
            Ok(task) => train_corrector_isolated(
                task,
                &cell.config.corrector_spec(),
                cell.config.sample_fraction,
                &cell.config.isolated,
            )
            .map_err(|e| e.to_string()),
            Err(e) => Err(e.clone()),
        };
        out.push(match run {
            Ok(r) => CellResult {
                cell,
                config_digest,
                cell_digest,
                param_count,
                staleness_kl: r.kl_stale,
                kl_corrected: r.kl_corrected,
                epochs: r.epochs,
                error: None,
            },
            Err(e) => CellResult {
                cell,
                config_digest,
                cell_digest,
                param_count,
                staleness_kl: f64::NAN,
                kl_corrected: f64::NAN,
                epochs: 0,
                error: Some(e),
            },
        });
    }
    Ok(out)
}

pub const SWEEP_CSV_HEADER: [&str; 14] = [
    "cell",
    "config_digest",
    "cell_digest",
    "drift_scale",
    "depth",
    "width",
    "param_count",
    "sample_fraction",
    "replicate",
    "seed",
    "staleness_kl",
    "kl_corrected",
    "epochs",
    "status",
];

pub fn write_sweep_csv<W: Write>(w: W, results: &[CellResult]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(SWEEP_CSV_HEADER)?;
    for r in results {
        let c = &r.cell.config;
        csv.write_record([
            r.cell.index.to_string(),
            r.config_digest.clone(),
            r.cell_digest.clone(),
            c.synth.drift_variance_scale.to_string(),
            c.depth.to_string(),
            c.width.to_string(),
            r.param_count.to_string(),
            c.sample_fraction.to_string(),
            r.cell.replicate.to_string(),
            c.synth.seed.to_string(),
            r.staleness_kl.to_string(),
            r.kl_corrected.to_string(),
            r.epochs.to_string(),
            match &r.error {
                None => "ok".to_string(),
                Some(e) => format!("failed: {e}"),
            },
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// One JSON object per cell, full config included.
pub fn write_sweep_jsonl<W: Write>(mut w: W, results: &[CellResult]) -> Result<()> {
    for r in results {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}
