use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record written next to every run's outputs. Everything except the
/// timestamps is a pure function of `(command, config, seed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Digest of the resolved config.
    pub config_digest: String,
    /// Digest of the resolved config with its seeds zeroed; runs that
    /// differ only by seed share it.
    pub cell_digest: String,
    pub config: Value,
    pub metrics: BTreeMap<String, f64>,
    /// SHA-256 of each deterministic output file, by file name.
    pub outputs: BTreeMap<String, String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Reads `dir/manifest.json`, or `dir` itself when it names a file.
    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let bytes = fs::read(&file)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", file.display())))
    }

    /// Fields that must agree bit for bit between a run and its re-execution.
    pub fn same_results(&self, other: &Self) -> bool {
        self.command == other.command
            && self.config_digest == other.config_digest
            && self.outputs == other.outputs
            && self.metrics.len() == other.metrics.len()
            && self
                .metrics
                .iter()
                .zip(&other.metrics)
                .all(|((ka, va), (kb, vb))| ka == kb && va.to_bits() == vb.to_bits())
    }
}

pub fn now_unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
