//! Per-iteration metrics CSV with a fixed column order.
//!
//! The first line is `# columns-sha256=<hex>`, the hash of the header line,
//! so readers can detect a schema change before parsing.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::{Algorithm, UpdateStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub wall_ms: f64,
    pub mean_reward: f64,
    pub answer_accuracy: f64,
    pub contradiction_rate: f64,
    pub entailed_rate: f64,
    pub mean_entropy: f64,
    pub grad_norm: f64,
    pub mean_kl: f64,
    pub algorithm: Algorithm,
    pub seed: u64,
}

pub const METRICS_COLUMNS: [&str; 11] = [
    "iteration",
    "wall_ms",
    "mean_reward",
    "answer_accuracy",
    "contradiction_rate",
    "entailed_rate",
    "mean_entropy",
    "grad_norm",
    "mean_kl",
    "algorithm",
    "seed",
];

/// Columns that legitimately differ between otherwise identical runs.
pub const VOLATILE_COLUMNS: [&str; 1] = ["wall_ms"];

impl MetricsRow {
    pub fn new(stats: &UpdateStats, wall_ms: f64, algorithm: Algorithm, seed: u64) -> Self {
        Self {
            iteration: stats.iteration,
            wall_ms,
            mean_reward: stats.mean_reward,
            answer_accuracy: stats.answer_accuracy,
            contradiction_rate: stats.contradiction_rate,
            entailed_rate: stats.entailed_rate,
            mean_entropy: stats.mean_entropy,
            grad_norm: stats.grad_norm,
            mean_kl: stats.mean_kl,
            algorithm,
            seed,
        }
    }
}

pub fn header_hash() -> String {
    hex::encode(Sha256::digest(METRICS_COLUMNS.join(",").as_bytes()))
}

/// Single writer for one metrics file; every row is flushed as it is written.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = File::create(path)?;
        writeln!(f, "# columns-sha256={}", header_hash())?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(f);
        inner.write_record(METRICS_COLUMNS)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Reads a metrics file, checking the header hash.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut reader = BufReader::new(crate::error::open_file(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let expected = format!("# columns-sha256={}", header_hash());
    if first.trim_end() != expected {
        return Err(Error::Load(format!("metrics header hash mismatch: found {:?}", first.trim_end())));
    }
    let mut csv = csv::Reader::from_reader(reader);
    Ok(csv.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// The metrics file with the given columns removed, for byte-level comparison
/// of runs.
pub fn strip_columns(text: &str, drop: &[&str]) -> Result<String> {
    let mut lines = text.lines();
    let hash = lines.next().ok_or_else(|| Error::Load("empty metrics file".into()))?;
    let body: String = lines.map(|l| format!("{l}\n")).collect();
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(body.as_bytes());
    let mut out = csv::Writer::from_writer(Vec::new());
    let mut keep: Option<Vec<usize>> = None;
    for rec in reader.records() {
        let rec = rec?;
        let idx = keep.get_or_insert_with(|| (0..rec.len()).filter(|&i| !drop.contains(&&rec[i])).collect());
        out.write_record(idx.iter().map(|&i| &rec[i]))?;
    }
    let bytes = out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(format!("{hash}\n{}", String::from_utf8_lossy(&bytes)))
}

/// Mean of `f` over the last `n` rows (all rows when fewer).
pub fn tail_mean(rows: &[MetricsRow], n: usize, f: impl Fn(&MetricsRow) -> f64) -> f64 {
    let tail = &rows[rows.len().saturating_sub(n)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().map(f).sum::<f64>() / tail.len() as f64
}
