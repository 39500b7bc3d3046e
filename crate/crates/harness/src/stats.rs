//! Five-number summaries for box-plot style reporting.

use adapterbench_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Distribution of one metric across trials: population std plus the
/// five-number summary, with the raw values kept so every statistic can be
/// recomputed from the report itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation (divide by n, not n-1).
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub values: Vec<f64>,
}

/// Percentile by linear interpolation between closest ranks on sorted data.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = pct / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

impl DistributionSummary {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data(
                "cannot summarize an empty set of values".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("summary values must be finite".into()));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(Self {
            n,
            mean,
            std: var.sqrt(),
            min: sorted[0],
            q1: percentile(&sorted, 25.0),
            median: percentile(&sorted, 50.0),
            q3: percentile(&sorted, 75.0),
            max: sorted[n - 1],
            values,
        })
    }

    /// The five-number ordering that makes a box plot drawable.
    pub fn is_ordered(&self) -> bool {
        self.min <= self.q1 && self.q1 <= self.median && self.median <= self.q3 && self.q3 <= self.max
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_degenerates() {
        let s = DistributionSummary::from_values(vec![0.7]).unwrap();
        assert_eq!(s.n, 1);
        assert_eq!(s.std, 0.0);
        assert_eq!(s.min, 0.7);
        assert_eq!(s.median, 0.7);
        assert_eq!(s.max, 0.7);
    }

    #[test]
    fn known_quartiles() {
        // 1..=5: q1 = 2, median = 3, q3 = 4 under linear interpolation
        let s = DistributionSummary::from_values(vec![5.0, 3.0, 1.0, 4.0, 2.0]).unwrap();
        assert_eq!(s.min, 1.0);
        assert_eq!(s.q1, 2.0);
        assert_eq!(s.median, 3.0);
        assert_eq!(s.q3, 4.0);
        assert_eq!(s.max, 5.0);
        assert_eq!(s.mean, 3.0);
        // population std of 1..5 = sqrt(2)
        assert!((s.std - 2.0f64.sqrt()).abs() < 1e-12);
        assert!(s.is_ordered());
    }

    #[test]
    fn interpolates_between_ranks() {
        let s = DistributionSummary::from_values(vec![1.0, 2.0, 3.0, 10.0]).unwrap();
        // rank 0.75 between 1 and 2
        assert!((s.q1 - 1.75).abs() < 1e-12);
        assert!((s.median - 2.5).abs() < 1e-12);
        assert!((s.q3 - 4.75).abs() < 1e-12);
    }

    #[test]
    fn summary_recomputable_from_raw_values() {
        let values = vec![0.61, 0.55, 0.72, 0.49, 0.66, 0.58];
        let s = DistributionSummary::from_values(values.clone()).unwrap();
        let again = DistributionSummary::from_values(s.values.clone()).unwrap();
        assert_eq!(s, again);
        let _ = values;
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(DistributionSummary::from_values(vec![]).is_err());
        assert!(DistributionSummary::from_values(vec![1.0, f64::NAN]).is_err());
    }
}
