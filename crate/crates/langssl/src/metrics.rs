//! Append-only metrics log, one JSON object per line.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use langssl_core::trainer::StepMetrics;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    #[serde(flatten)]
    pub metrics: StepMetrics,
    /// Seconds since the writer was opened.
    pub wall_time: f64,
}

pub struct MetricsWriter {
    file: File,
    path: PathBuf,
    start: Instant,
}

impl MetricsWriter {
    /// Opens `path` for appending, first dropping records at or after
    /// `from_step` so a resumed run does not duplicate steps.
    pub fn open(path: &Path, from_step: u64) -> Result<Self> {
        if path.exists() {
            let kept: Vec<MetricsRecord> = read_metrics(path)?
                .into_iter()
                .filter(|r| r.metrics.step < from_step)
                .collect();
            let mut text = String::new();
            for r in &kept {
                text.push_str(&serde_json::to_string(r).expect("metrics serialize"));
                text.push('\n');
            }
            fs::write(path, text).map_err(Error::io(path))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(Error::io(path))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
            start: Instant::now(),
        })
    }

    pub fn write(&mut self, metrics: &StepMetrics) -> Result<()> {
        let rec = MetricsRecord {
            metrics: metrics.clone(),
            wall_time: self.start.elapsed().as_secs_f64(),
        };
        let mut line = serde_json::to_string(&rec).expect("metrics serialize");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(Error::io(&self.path))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

/// Mean of `f` over the last `window` records.
pub fn tail_mean(
    records: &[StepMetrics],
    window: usize,
    f: impl Fn(&StepMetrics) -> f64,
) -> Option<f64> {
    let tail = &records[records.len().saturating_sub(window)..];
    (!tail.is_empty()).then(|| tail.iter().map(f).sum::<f64>() / tail.len() as f64)
}
