//! Metric aggregation: nearest-rank percentiles and the normalized
//! completion-time CDF export.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty input")]
    EmptyInput,
    #[error("invalid metric: {0}")]
    InvalidMetric(String),
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest value, no
/// interpolation. `p = 0` returns the minimum, `p = 100` the maximum.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, MetricError> {
    if values.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    assert!((0.0..=100.0).contains(&p), "percentile p out of range");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

/// Completion times normalized by the maximum, as CDF step points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfExport {
    /// Ascending distinct normalized values in (0, 1]; the last is exactly 1.
    pub values: Vec<f64>,
    /// Strictly increasing cumulative fractions, ending at 1.
    pub fractions: Vec<f64>,
    /// Max completion time over the nearest-rank median.
    pub max_over_median: f64,
}

impl CdfExport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("normalized_time,cum_fraction\n");
        for (v, f) in self.values.iter().zip(&self.fractions) {
            out.push_str(&format!("{v},{f}\n"));
        }
        out
    }
}

/// Normalizes completion times against the maximum and collapses duplicates
/// into CDF step points. Scale-invariant by construction.
pub fn normalized_cdf(times: &[f64]) -> Result<CdfExport, MetricError> {
    if times.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if let Some(&bad) = times.iter().find(|&&t| !(t > 0.0)) {
        return Err(MetricError::InvalidMetric(format!(
            "non-positive completion time {bad}"
        )));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let max = *sorted.last().unwrap();
    let median = percentile(times, 50.0)?;
    let n = sorted.len();
    let mut values = Vec::new();
    let mut fractions = Vec::new();
    for (i, &t) in sorted.iter().enumerate() {
        let norm = t / max;
        let frac = (i + 1) as f64 / n as f64;
        if values.last() == Some(&norm) {
            *fractions.last_mut().unwrap() = frac;
        } else {
            values.push(norm);
            fractions.push(frac);
        }
    }
    Ok(CdfExport {
        values,
        fractions,
        max_over_median: max / median,
    })
}
