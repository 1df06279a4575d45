//! Result artifacts: the long-format metrics CSV and the per-run JSON
//! summary. Every value written here must be finite, and the byte stream is
//! a pure function of the rows pushed — reruns with the same config and
//! seeds reproduce the files exactly.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

pub struct ResultsWriter {
    out: BufWriter<File>,
}

impl ResultsWriter {
    pub fn create(path: &Path) -> io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "run_id,seed,after_task,metric,value")?;
        Ok(Self { out })
    }

    pub fn row(
        &mut self,
        run_id: &str,
        seed: u64,
        after_task: usize,
        metric: &str,
        value: f32,
    ) -> io::Result<()> {
        if !value.is_finite() {
            return Err(io::Error::other(format!(
                "refusing to write non-finite value for metric '{}' (run {}, seed {}, task {})",
                metric, run_id, seed, after_task
            )));
        }
        writeln!(self.out, "{},{},{},{},{}", run_id, seed, after_task, metric, value)
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// Mean and sample standard deviation (n−1 in the denominator; 0 when only
/// one value is present).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        (ss / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub run_id: String,
    pub seeds: Vec<u64>,
    pub num_tasks: usize,
    /// Mean accuracy over all tasks after the final one.
    pub acc: MeanStd,
    /// Accuracy on the final task after the final task.
    pub acc_last: MeanStd,
    /// Forgetting measure after the final task.
    pub fm: MeanStd,
}

pub fn write_summary(path: &Path, summary: &Summary) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let text = serde_json::to_string_pretty(summary).map_err(io::Error::other)?;
    out.write_all(text.as_bytes())?;
    writeln!(out)?;
    out.flush()
}

/// A small generic CSV writer for the sweep tables (fixed header, rows of
/// display-formatted cells).
pub fn write_table(path: &Path, header: &str, rows: &[Vec<String>]) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", header)?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()
}
