//! Aggregation of finished runs across seeds. Reads manifests and sweep
//! cell logs; computes nothing but order statistics.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numkernel;

use super::manifest::RunManifest;
use super::runs::seedless_config;
use super::{Command, SWEEP_JSONL};

/// One seeded measurement: a single run, or one cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub command: String,
    pub cell_digest: String,
    /// Resolved config with seeds zeroed.
    pub config: Value,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

pub fn collect_records(dirs: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for dir in dirs {
        let manifest = RunManifest::read(dir)?;
        let cells = dir.join(SWEEP_JSONL);
        if cells.is_file() {
            out.extend(sweep_records(&manifest.command, &cells)?);
        } else {
            let command: Command = manifest.command.parse()?;
            out.push(RunRecord {
                config: seedless_config(command, &manifest.config)?,
                command: manifest.command,
                cell_digest: manifest.cell_digest,
                seed: manifest.seed,
                metrics: manifest.metrics,
            });
        }
    }
    Ok(out)
}

fn sweep_records(command: &str, path: &Path) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let v: Value = serde_json::from_str(&line?)?;
        if !v["error"].is_null() {
            continue;
        }
        let field = |k: &str| {
            v[k].as_f64()
                .ok_or_else(|| Error::Format(format!("sweep cell without numeric `{k}`")))
        };
        let metrics = ["param_count", "staleness_kl", "kl_corrected", "epochs"]
            .iter()
            .map(|&k| Ok((k.to_string(), field(k)?)))
            .collect::<Result<_>>()?;
        let config = &v["cell"]["config"];
        out.push(RunRecord {
            command: command.to_string(),
            cell_digest: v["cell_digest"]
                .as_str()
                .ok_or_else(|| Error::Format("sweep cell without digest".into()))?
                .to_string(),
            seed: config["synth"]["seed"].as_u64().unwrap_or(0),
            config: seedless_config(Command::TrainCorrector, config)?,
            metrics,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub values: Vec<f64>,
}

impl MetricSummary {
    fn of(values: Vec<f64>) -> Self {
        Self {
            n: values.len(),
            median: numkernel::median(&values).unwrap_or(f64::NAN),
            q25: numkernel::quantile(&values, 0.25).unwrap_or(f64::NAN),
            q75: numkernel::quantile(&values, 0.75).unwrap_or(f64::NAN),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell_digest: String,
    pub command: String,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MetricSummary>,
}

/// Groups records by cell digest in first-seen order. Two records with one
/// digest but different configs abort the report.
pub fn aggregate(records: &[RunRecord]) -> Result<Vec<CellSummary>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let g = groups.entry(r.cell_digest.clone()).or_default();
        if let Some(first) = g.first() {
            if first.config != r.config || first.command != r.command {
                return Err(Error::DigestCollision {
                    digest: r.cell_digest.clone(),
                });
            }
        } else {
            order.push(r.cell_digest.clone());
        }
        g.push(r);
    }
    Ok(order
        .into_iter()
        .map(|digest| {
            let g = &groups[&digest];
            let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in g {
                for (k, v) in &r.metrics {
                    values.entry(k.clone()).or_default().push(*v);
                }
            }
            CellSummary {
                command: g[0].command.clone(),
                config: g[0].config.clone(),
                seeds: g.iter().map(|r| r.seed).collect(),
                metrics: values.into_iter().map(|(k, v)| (k, MetricSummary::of(v))).collect(),
                cell_digest: digest,
            }
        })
        .collect())
}

pub const REPORT_CSV_HEADER: [&str; 7] = ["cell_digest", "command", "metric", "n", "median", "q25", "q75"];

/// Long format: one row per (cell, metric).
pub fn write_report_csv<W: Write>(w: W, cells: &[CellSummary]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(REPORT_CSV_HEADER)?;
    for c in cells {
        for (name, m) in &c.metrics {
            csv.write_record([
                c.cell_digest.clone(),
                c.command.clone(),
                name.clone(),
                m.n.to_string(),
                m.median.to_string(),
                m.q25.to_string(),
                m.q75.to_string(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}
