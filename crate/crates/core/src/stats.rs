//! Small statistics helpers for ensemble summaries.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub halfwidth: f64,
    pub samples: usize,
}

impl MeanCi {
    pub fn lower(&self) -> f64 {
        self.mean - self.halfwidth
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.halfwidth
    }

    pub fn excludes_zero(&self) -> bool {
        self.lower() > 0.0 || self.upper() < 0.0
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Two-sided Student-t quantile for confidence `level`.
pub fn t_quantile(level: f64, dof: usize) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, dof.max(1) as f64).expect("valid Student-t");
    dist.inverse_cdf(0.5 + 0.5 * level)
}

/// Student-t confidence interval of the mean of independent samples.
pub fn mean_ci(xs: &[f64], level: f64) -> MeanCi {
    let n = xs.len();
    let m = mean(xs);
    let hw = if n < 2 { f64::INFINITY } else { t_quantile(level, n - 1) * std_dev(xs) / (n as f64).sqrt() };
    MeanCi { mean: m, halfwidth: hw, samples: n }
}

/// Batch-means interval for a single correlated series: the series is cut
/// into `batches` contiguous blocks whose means are treated as independent.
pub fn batch_means_ci(series: &[f64], batches: usize, level: f64) -> MeanCi {
    let b = batches.max(2).min(series.len().max(2));
    let len = series.len() / b;
    if len == 0 {
        return MeanCi { mean: mean(series), halfwidth: f64::INFINITY, samples: series.len() };
    }
    let means: Vec<f64> = (0..b).map(|i| mean(&series[i * len..(i + 1) * len])).collect();
    let mut ci = mean_ci(&means, level);
    ci.samples = series.len();
    ci
}

/// Median of a sample (NaN for an empty one).
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}
