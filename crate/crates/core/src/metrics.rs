//! Per-round diagnostics and the metrics CSV stream.
//!
//! File layout: a `# fedsampler-metrics v1` marker line, a header line, then
//! one row per round. Reals are printed with 17 significant digits and the
//! cohort is `;`-joined.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::vector;

pub const SCHEMA_MARKER: &str = "# fedsampler-metrics v1";

pub const COLUMNS: [&str; 10] = [
    "round",
    "global_loss",
    "full_grad_norm",
    "update_gap",
    "update_variance",
    "phi_ratio",
    "selected",
    "probabilities_entropy",
    "wall_ms",
    "fallback",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    /// Full-population weighted loss at the round's starting parameters.
    pub global_loss: f64,
    pub full_grad_norm: f64,
    /// Realized `||grad f~_S - grad f||` for this round's cohort.
    pub update_gap: f64,
    /// Spread of the importance-weighted cohort updates around their mean.
    pub update_variance: f64,
    /// `m sum p^2 / (sum p)^2` of the probabilities the cohort was drawn from.
    pub phi_ratio: f64,
    pub selected: Vec<usize>,
    pub probabilities_entropy: f64,
    /// Zero unless wall-clock recording is switched on.
    pub wall_ms: f64,
    /// An allocator fell back because its scores were degenerate.
    pub fallback: bool,
}

/// `||cohort_grad - full_grad||`.
pub fn update_gap(cohort_grad: &[f64], full_grad: &[f64]) -> Result<f64> {
    if cohort_grad.len() != full_grad.len() {
        return Err(Error::DimensionMismatch {
            expected: full_grad.len(),
            actual: cohort_grad.len(),
        });
    }
    Ok(vector::distance(cohort_grad, full_grad))
}

/// Variance ratio of uniform sampling over score-proportional sampling,
/// `m sum c_i^2 / (sum c_i)^2`. At least 1 by Cauchy-Schwarz, with equality
/// exactly when all scores agree.
pub fn phi_ratio(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidSampling("phi ratio of an empty score vector".into()));
    }
    if let Some(c) = scores.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(Error::InvalidSampling(format!("phi ratio needs positive scores, got {c}")));
    }
    // rescale by the max so squares stay in range
    let max = scores.iter().copied().fold(0.0, f64::max);
    let m = scores.len() as f64;
    let sum: f64 = scores.iter().map(|c| c / max).sum();
    let sq: f64 = scores.iter().map(|c| (c / max) * (c / max)).sum();
    Ok(m * sq / (sum * sum))
}

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn format_row(r: &RoundMetrics) -> String {
    let selected = r
        .selected
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(";");
    [
        r.round.to_string(),
        real(r.global_loss),
        real(r.full_grad_norm),
        real(r.update_gap),
        real(r.update_variance),
        real(r.phi_ratio),
        selected,
        real(r.probabilities_entropy),
        real(r.wall_ms),
        u8::from(r.fallback).to_string(),
    ]
    .join(",")
}

/// Streaming writer; rows are appended in the order they are pushed.
pub struct CsvSink<W: Write> {
    out: W,
    rows: usize,
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{SCHEMA_MARKER}")?;
        writeln!(out, "{}", COLUMNS.join(","))?;
        Ok(CsvSink { out, rows: 0 })
    }

    pub fn push(&mut self, r: &RoundMetrics) -> Result<()> {
        writeln!(self.out, "{}", format_row(r))?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Writes `records` to `path`, replacing any existing file.
pub fn emit_csv<'a>(records: impl IntoIterator<Item = &'a RoundMetrics>, path: &Path) -> Result<()> {
    let mut sink = CsvSink::new(BufWriter::new(File::create(path)?))?;
    for r in records {
        sink.push(r)?;
    }
    sink.finish()?;
    Ok(())
}
