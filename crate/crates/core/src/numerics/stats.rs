//! Empirical quantiles.

use crate::error::{Error, Result};

fn check(sorted: &[f64], level: f64) -> Result<()> {
    if sorted.is_empty() {
        return Err(Error::InvalidParameter("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::InvalidParameter(format!("quantile level {level} outside [0, 1]")));
    }
    Ok(())
}

/// Linear interpolation between order statistics (Hyndman–Fan type 7).
pub fn quantile_linear(sorted: &[f64], level: f64) -> Result<f64> {
    check(sorted, level)?;
    let h = (sorted.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Inverse empirical CDF: the smallest sample value x with F̂(x) ≥ level (type 1).
pub fn quantile_inverse_cdf(sorted: &[f64], level: f64) -> Result<f64> {
    check(sorted, level)?;
    let k = (level * sorted.len() as f64).ceil() as usize;
    Ok(sorted[k.clamp(1, sorted.len()) - 1])
}

/// Sort a copy with the IEEE total order.
pub fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}
