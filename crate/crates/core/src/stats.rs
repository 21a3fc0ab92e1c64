//! Distribution summaries used by the analysis reports.

use serde::{Deserialize, Serialize};

/// Number of uniform bins used for report histograms.
pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub q10: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q90: f64,
}

impl Summary {
    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }

    /// Summary of a non-empty sample; quantiles use linear interpolation.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Some(Self {
            count: values.len(),
            mean,
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            q10: quantile_sorted(&sorted, 0.10),
            q25: quantile_sorted(&sorted, 0.25),
            median: quantile_sorted(&sorted, 0.5),
            q75: quantile_sorted(&sorted, 0.75),
            q90: quantile_sorted(&sorted, 0.90),
        })
    }
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn median(values: &[f64]) -> Option<f64> {
    Summary::of(values).map(|s| s.median)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges, uniform over `[0, max]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Uniform histogram over `[0, upper]` for nonnegative values; `upper` defaults
/// to the largest value. A degenerate range collapses everything into bin 0.
pub fn histogram(values: &[f64], bins: usize, upper: Option<f64>) -> Histogram {
    let top = upper.unwrap_or_else(|| values.iter().cloned().fold(0.0, f64::max));
    let edges: Vec<f64> = (0..=bins).map(|i| top * i as f64 / bins as f64).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let idx = if top > 0.0 {
            ((v / top) * bins as f64).floor() as usize
        } else {
            0
        };
        counts[idx.min(bins - 1)] += 1;
    }
    Histogram { edges, counts }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_of_small_samples() {
        let s = Summary::of(&[3.0, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(s.median, 2.5);
        assert_eq!(s.min, 1.0);
        assert_eq!(s.max, 4.0);
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.q25, 1.75);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn histogram_counts_everything() {
        let v = [0.0, 0.1, 0.5, 1.0, 1.0];
        let h = histogram(&v, 4, None);
        assert_eq!(h.counts.iter().sum::<usize>(), 5);
        assert_eq!(h.counts, vec![2, 0, 1, 2]);
        let zeros = histogram(&[0.0, 0.0], 50, None);
        assert_eq!(zeros.counts[0], 2);
    }
}
