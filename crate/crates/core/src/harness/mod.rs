//! Configuration digests, sweeps, manifests and report aggregation.

pub mod config;
pub mod manifest;
pub mod report;
pub mod runs;
pub mod small_large;
pub mod sweep;

#[cfg(test)]
mod tests;

use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use manifest::{file_digest, RunManifest, MANIFEST_FILE};
pub use report::{aggregate, collect_records, write_report_csv, CellSummary, MetricSummary, RunRecord};
pub use runs::{
    default_config, seedless_config, CheckTheoryConfig, EvalConfig, Metrics, RunConfig, TrainCorrectorConfig,
    TrainJointConfig, TrainRlmConfig,
};
pub use small_large::{neighbor_precision, small_approximates_large, NeighborPrecision, SmallLargeConfig};
pub use sweep::{run_sweep, CellResult, SweepCell, SweepSpec};

pub const SWEEP_CSV: &str = "cells.csv";
pub const SWEEP_JSONL: &str = "cells.jsonl";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

/// Hex SHA-256 of the value's JSON serialization. Struct fields serialize in
/// declaration order, so equal configs always hash equally.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    SynthGen,
    TrainCorrector,
    TrainJoint,
    TrainRlm,
    SweepCapacity,
    SweepFraction,
    CheckTheory,
    SmallLarge,
    Eval,
    Report,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::SynthGen,
        Command::TrainCorrector,
        Command::TrainJoint,
        Command::TrainRlm,
        Command::SweepCapacity,
        Command::SweepFraction,
        Command::CheckTheory,
        Command::SmallLarge,
        Command::Eval,
        Command::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::SynthGen => "synth-gen",
            Command::TrainCorrector => "train-corrector",
            Command::TrainJoint => "train-joint",
            Command::TrainRlm => "train-rlm",
            Command::SweepCapacity => "sweep-capacity",
            Command::SweepFraction => "sweep-fraction",
            Command::CheckTheory => "check-theory",
            Command::SmallLarge => "small-large",
            Command::Eval => "eval",
            Command::Report => "report",
        }
    }

    /// Whether the command is a seeded run that writes a manifest.
    pub fn is_run(self) -> bool {
        self != Command::Report
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown command `{s}`")))
    }
}

/// Runs `command` with `config` (a possibly partial JSON object; missing
/// fields take defaults) and `seed`, writes outputs and a manifest to `out`.
pub fn execute(command: Command, config: &Value, seed: u64, out: &Path) -> Result<RunManifest> {
    let started = manifest::now_unix_ms();
    let run = runs::run_command(command, config, seed, out)?;
    let mut outputs = std::collections::BTreeMap::new();
    for entry in fs::read_dir(out)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name == MANIFEST_FILE {
            continue;
        }
        if path.is_file() {
            outputs.insert(name, file_digest(&path)?);
        } else if path.is_dir() {
            for sub in fs::read_dir(&path)? {
                let p = sub?.path();
                if p.is_file() {
                    let sub_name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                    outputs.insert(format!("{name}/{sub_name}"), file_digest(&p)?);
                }
            }
        }
    }
    let manifest = RunManifest {
        command: command.as_str().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config_digest: run.config_digest,
        cell_digest: run.cell_digest,
        config: run.config,
        metrics: run.metrics,
        outputs,
        started_unix_ms: started,
        finished_unix_ms: manifest::now_unix_ms(),
    };
    manifest.write(out)?;
    Ok(manifest)
}

/// Re-executes the run recorded in `manifest_path` into `out`.
pub fn rerun(manifest_path: &Path, out: &Path) -> Result<RunManifest> {
    let m = RunManifest::read(manifest_path)?;
    let command: Command = m.command.parse()?;
    execute(command, &m.config, m.seed, out)
}

/// Aggregates finished runs into `out/report.csv` and `out/report.json`.
pub fn run_report(dirs: &[PathBuf], out: &Path) -> Result<Vec<CellSummary>> {
    if dirs.is_empty() {
        return Err(Error::invalid("report needs at least one run directory"));
    }
    let cells = aggregate(&collect_records(dirs)?)?;
    fs::create_dir_all(out)?;
    write_report_csv(BufWriter::new(File::create(out.join(REPORT_CSV))?), &cells)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(out.join(REPORT_JSON))?), &cells)?;
    Ok(cells)
}
