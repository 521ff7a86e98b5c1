//! The cached target-embedding table and its refresh bookkeeping.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::net::{read_f64, read_u32, read_u64, MlpNet};
use crate::numkernel::{l1_distance, EmbeddingMatrix};

pub const BUFFER_MAGIC: &[u8; 8] = b"CORRBUF1";

/// Which rows to re-encode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefreshRows {
    All,
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetBuffer {
    embeddings: EmbeddingMatrix,
    last_refresh_step: Vec<u64>,
    reembed_counter: u64,
}

/// Per-row `||B_y - g(y)||_1` with aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct Staleness {
    pub per_row: Vec<f64>,
    pub mean: f64,
    pub max: f64,
}

impl TargetBuffer {
    /// Encodes every target once with `g`.
    pub fn init_from_encoder(g: &MlpNet, targets_raw: &EmbeddingMatrix) -> Result<Self> {
        let embeddings = g.predict(targets_raw)?;
        let n = embeddings.rows();
        Ok(Self {
            embeddings,
            last_refresh_step: vec![0; n],
            reembed_counter: n as u64,
        })
    }

    /// Wraps rows that were already produced by an encoder pass; counts as
    /// one full encoding.
    pub fn from_embeddings(embeddings: EmbeddingMatrix) -> Self {
        let n = embeddings.rows();
        Self {
            embeddings,
            last_refresh_step: vec![0; n],
            reembed_counter: n as u64,
        }
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn reembed_counter(&self) -> u64 {
        self.reembed_counter
    }

    pub fn last_refresh_step(&self) -> &[u64] {
        &self.last_refresh_step
    }

    /// Re-encodes the listed rows with the current `g`.
    pub fn refresh(&mut self, g: &MlpNet, targets_raw: &EmbeddingMatrix, rows: &RefreshRows, step: u64) -> Result<()> {
        if targets_raw.rows() != self.len() {
            return Err(Error::shape(format!(
                "{} raw targets for a buffer of {} rows",
                targets_raw.rows(),
                self.len()
            )));
        }
        match rows {
            RefreshRows::All => {
                let fresh = g.predict(targets_raw)?;
                if fresh.dim() != self.embeddings.dim() {
                    return Err(Error::shape(format!(
                        "encoder emits dim {} but buffer holds dim {}",
                        fresh.dim(),
                        self.embeddings.dim()
                    )));
                }
                self.embeddings = fresh;
                self.last_refresh_step.iter_mut().for_each(|s| *s = step);
                self.reembed_counter += self.len() as u64;
            }
            RefreshRows::Indices(idx) => {
                if idx.is_empty() {
                    return Ok(());
                }
                let fresh = g.predict(&targets_raw.select_rows(idx)?)?;
                for (r, &i) in idx.iter().enumerate() {
                    self.embeddings.set_row(i, fresh.row(r))?;
                    self.last_refresh_step[i] = step;
                }
                self.reembed_counter += idx.len() as u64;
            }
        }
        Ok(())
    }

    pub fn staleness_l1(&self, g: &MlpNet, targets_raw: &EmbeddingMatrix) -> Result<Staleness> {
        let fresh = g.predict(targets_raw)?;
        if fresh.shape() != self.embeddings.shape() {
            return Err(Error::shape(format!(
                "fresh rows {}x{} vs buffer {}x{}",
                fresh.rows(),
                fresh.dim(),
                self.len(),
                self.embeddings.dim()
            )));
        }
        let per_row: Vec<f64> = self
            .embeddings
            .iter_rows()
            .zip(fresh.iter_rows())
            .map(|(b, f)| l1_distance(b, f))
            .collect();
        let mean = if per_row.is_empty() {
            0.0
        } else {
            per_row.iter().sum::<f64>() / per_row.len() as f64
        };
        let max = per_row.iter().copied().fold(0.0, f64::max);
        Ok(Staleness { per_row, mean, max })
    }

    /// Writes the little-endian `CORRBUF1` checkpoint. The reembed counter is
    /// not part of the format.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BUFFER_MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.embeddings.dim() as u32).to_le_bytes())?;
        for v in self.embeddings.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for s in &self.last_refresh_step {
            w.write_all(&s.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a checkpoint; the restored buffer counts as `N` encodings.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BUFFER_MAGIC {
            return Err(Error::Format(format!("bad buffer magic {magic:?}")));
        }
        let n = read_u64(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            data.push(read_f64(&mut r)?);
        }
        let embeddings = EmbeddingMatrix::new(n, d, data)?;
        let mut steps = Vec::with_capacity(n);
        for _ in 0..n {
            steps.push(read_u64(&mut r)?);
        }
        Ok(Self {
            embeddings,
            last_refresh_step: steps,
            reembed_counter: n as u64,
        })
    }
}
