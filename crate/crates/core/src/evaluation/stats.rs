use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::{Error, Result};

/// Outcome of a two-sided paired t-test of `runs_a` against `runs_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub runs_a: Vec<f64>,
    pub runs_b: Vec<f64>,
    /// Mean of `a - b`.
    pub mean_diff: f64,
    pub t_statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub test: String,
}

/// Two-sided paired t-test on per-seed differences.
///
/// Zero-variance differences are resolved without dividing by zero: a zero
/// mean gives `p = 1`, any other mean gives `p = 0`.
pub fn paired_t_test(runs_a: &[f64], runs_b: &[f64]) -> Result<SignificanceReport> {
    if runs_a.len() != runs_b.len() {
        return Err(Error::Contract(format!(
            "paired runs differ in length: {} vs {}",
            runs_a.len(),
            runs_b.len()
        )));
    }
    let n = runs_a.len();
    if n < 2 {
        return Err(Error::Contract(format!(
            "a paired t-test needs at least 2 runs, got {n}"
        )));
    }
    if runs_a.iter().chain(runs_b).any(|v| !v.is_finite()) {
        return Err(Error::Contract("runs must be finite".into()));
    }
    let diffs: Vec<f64> = runs_a.iter().zip(runs_b).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    let (t, p) = if var == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean / (var / n as f64).sqrt();
        let dist =
            StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Contract(e.to_string()))?;
        // 2 * P(T <= -|t|) keeps precision in the far tail.
        (t, (2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0))
    };
    Ok(SignificanceReport {
        runs_a: runs_a.to_vec(),
        runs_b: runs_b.to_vec(),
        mean_diff: mean,
        t_statistic: t,
        df,
        p_value: p,
        test: "paired_t".into(),
    })
}
