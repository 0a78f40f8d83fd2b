//! Per-round metrics records and their CSV / JSONL encodings.
//!
//! Floats are written in shortest round-trip form, so parsing an emitted
//! file reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "run_id,algorithm,condition,mode,seed,round,n_active_nodes,n_groups_total,test_accuracy,test_loss,wall_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub algorithm: String,
    pub condition: String,
    pub mode: String,
    pub seed: u64,
    pub round: usize,
    pub n_active_nodes: usize,
    pub n_groups_total: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    /// Equality on every field except the wall-clock timing.
    pub fn same_outcome(&self, other: &MetricsRow) -> bool {
        MetricsRow {
            wall_ms: 0,
            ..self.clone()
        } == MetricsRow {
            wall_ms: 0,
            ..other.clone()
        } && self.test_accuracy.to_bits() == other.test_accuracy.to_bits()
            && self.test_loss.to_bits() == other.test_loss.to_bits()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    Jsonl,
}

/// Membership of one merge event, by client id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub run_id: String,
    pub round: usize,
    pub groups: Vec<Vec<usize>>,
    pub unmerged: Vec<usize>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn emit_metrics(rows: &[MetricsRow], path: &Path, format: MetricsFormat) -> Result<()> {
    match format {
        MetricsFormat::Csv => write_csv(rows, path),
        MetricsFormat::Jsonl => write_jsonl(rows, path),
    }
}

fn write_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "{CSV_HEADER}").map_err(|e| Error::io(path, e))?;
    {
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(&mut out);
        for row in rows {
            writer
                .serialize(row)
                .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut out = create(path)?;
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::DataLoadFailure(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line)
                .map_err(|e| Error::DataLoadFailure(format!("{}: {e}", path.display())))
        })
        .collect()
}
