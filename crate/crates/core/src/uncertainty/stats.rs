use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tukey boxplot summary with upper-whisker outlier flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub iqr: f64,
    /// `q3 + 1.5 * iqr`.
    pub upper_fence: f64,
    /// Largest datum not above the fence.
    pub upper_whisker: f64,
    /// Indices (into the input) of values above the fence.
    pub flagged: Vec<usize>,
}

/// Linear-interpolation ("type 7") quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn rejection_stats(values: &[f64]) -> Result<BoxplotStats> {
    if values.len() < 4 {
        return Err(Error::invalid_arg(format!(
            "rejection statistics need at least 4 values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_arg("rejection statistics need finite values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let median = quantile_sorted(&sorted, 0.5);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let upper_fence = q3 + 1.5 * iqr;
    let upper_whisker = sorted
        .iter()
        .copied()
        .filter(|&v| v <= upper_fence)
        .fold(f64::NEG_INFINITY, f64::max);
    let flagged = values
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| (v > upper_fence).then_some(i))
        .collect();
    Ok(BoxplotStats {
        q1,
        median,
        q3,
        iqr,
        upper_fence,
        upper_whisker,
        flagged,
    })
}
