use serde::Serialize;

use crate::error::{Error, Result};

/// Quantile by linear interpolation between order statistics of `sorted`.
pub fn quantile_linear(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScalingStats {
    /// `q10(|Λ|) / q90(|Λ|)`; `None` when the 90% quantile is zero.
    pub ratio: Option<f64>,
    /// Signed mean of `Λ`.
    pub mean: f64,
}

/// Quantile ratio and mean of one layer's scaling weights.
pub fn scaling_stats(values: &[f64]) -> Result<ScalingStats> {
    if values.is_empty() {
        return Err(Error::invalid("scaling_stats", "empty scaling vector"));
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let q10 = quantile_linear(&abs, 0.1);
    let q90 = quantile_linear(&abs, 0.9);
    let ratio = (q90 != 0.0).then(|| q10 / q90);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(ScalingStats { ratio, mean })
}

pub fn scaling_stats_by_layer(layers: &[Vec<f64>]) -> Result<Vec<ScalingStats>> {
    layers.iter().map(|v| scaling_stats(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_weights() {
        let s = scaling_stats(&[0.7; 12]).unwrap();
        assert_eq!(s.ratio, Some(1.0));
        assert!((s.mean - 0.7).abs() < 1e-15);
    }

    #[test]
    fn one_to_ten() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        let s = scaling_stats(&v).unwrap();
        // q10 = 1 + 0.9·1 = 1.9, q90 = 1 + 8.1 = 9.1
        assert!((s.ratio.unwrap() - 1.9 / 9.1).abs() < 1e-12);
        assert!((s.ratio.unwrap() - 0.2088).abs() < 1e-4);
        assert_eq!(s.mean, 5.5);
    }

    #[test]
    fn symmetric_signs() {
        let s = scaling_stats(&[-3.0, 3.0]).unwrap();
        assert_eq!(s.mean, 0.0);
        assert_eq!(s.ratio, Some(1.0));
    }

    #[test]
    fn zero_upper_quantile_is_undefined_not_an_error() {
        let s = scaling_stats(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s.ratio, None);
        assert!(scaling_stats(&[]).is_err());
    }
}
