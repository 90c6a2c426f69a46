//! Tick logs and jitter statistics.
//!
//! For invocation instants `t_1..t_N` the increments are
//! `dt_k = t_{k+1} - t_k`. The summary reports their mean, extremes,
//! population standard deviation and a fixed-width histogram.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JitterError {
    #[error("need at least 2 instants, got {0}")]
    TooFewInstants(usize),
    #[error("histogram bin width must be positive, got {0}")]
    BinWidth(f64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Actual invocation instants of one timer, seconds on the scheduler clock.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TickLog {
    pub instants: Vec<f64>,
}

impl TickLog {
    pub fn new(instants: Vec<f64>) -> Self {
        TickLog { instants }
    }

    pub fn len(&self) -> usize {
        self.instants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instants.is_empty()
    }

    pub fn intervals(&self) -> Vec<f64> {
        self.instants.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// `t_N - t_1 - (N-1) * interval`: accumulated deviation from the grid.
    pub fn cumulative_drift(&self, interval: f64) -> Option<f64> {
        let (first, last) = (self.instants.first()?, self.instants.last()?);
        Some(last - first - (self.instants.len() - 1) as f64 * interval)
    }

    /// Largest `|t_k - (t_1 + (k-1) * interval)|` over the log.
    pub fn max_grid_deviation(&self, interval: f64) -> Option<f64> {
        let first = *self.instants.first()?;
        self.instants
            .iter()
            .enumerate()
            .map(|(k, t)| (t - (first + k as f64 * interval)).abs())
            .reduce(f64::max)
    }

    /// Columns `k,t_k,dt_k`; the last row has an empty `dt_k`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), JitterError> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["k", "t_k", "dt_k"])?;
        for (k, t) in self.instants.iter().enumerate() {
            let dt = self.instants.get(k + 1).map(|next| (next - t).to_string()).unwrap_or_default();
            out.write_record([(k + 1).to_string(), t.to_string(), dt])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// Left edge of the first bin (the smallest increment).
    pub start: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn bin_edges(&self) -> Vec<f64> {
        (0..=self.counts.len()).map(|i| self.start + i as f64 * self.bin_width).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JitterSummary {
    pub instants: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub std_dev: f64,
    pub histogram: Histogram,
}

pub const DEFAULT_BIN_WIDTH: f64 = 1e-3;

pub fn jitter_stats(log: &TickLog, bin_width: f64) -> Result<JitterSummary, JitterError> {
    let n = log.instants.len();
    if n < 2 {
        return Err(JitterError::TooFewInstants(n));
    }
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(JitterError::BinWidth(bin_width));
    }
    let dts = log.intervals();
    let mean = (log.instants[n - 1] - log.instants[0]) / (n - 1) as f64;
    let min = dts.iter().copied().fold(f64::INFINITY, f64::min);
    let max = dts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let var = dts.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / dts.len() as f64;

    let bins = ((max - min) / bin_width).floor() as usize + 1;
    let mut counts = vec![0u64; bins];
    for d in &dts {
        let i = (((d - min) / bin_width).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    Ok(JitterSummary {
        instants: n,
        mean,
        min,
        max,
        std_dev: var.sqrt(),
        histogram: Histogram { bin_width, start: min, counts },
    })
}
