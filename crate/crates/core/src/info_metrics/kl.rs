use serde::{Deserialize, Serialize};

use super::MetricsError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramKlConfig {
    pub bins: usize,
    pub smoothing_epsilon: f64,
}

impl Default for HistogramKlConfig {
    fn default() -> Self {
        Self {
            bins: 32,
            smoothing_epsilon: 1e-9,
        }
    }
}

impl HistogramKlConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.bins < 2 || !(self.smoothing_epsilon > 0.0) || !self.smoothing_epsilon.is_finite() {
            return Err(MetricsError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// `sum_i p_i ln(p_i / q_i)` for two probability vectors of equal length.
/// Terms with `p_i = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, MetricsError> {
    if p.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if p.len() != q.len() {
        return Err(MetricsError::LengthMismatch(p.len(), q.len()));
    }
    if !p.iter().chain(q).all(|x| x.is_finite() && *x >= 0.0) {
        return Err(MetricsError::NonFinite);
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum())
}

/// Smoothed, normalised histogram over `[lo, hi]` with equal-width bins.
fn smoothed_histogram(values: &[f64], lo: f64, hi: f64, cfg: &HistogramKlConfig) -> Vec<f64> {
    let mut counts = vec![0.0; cfg.bins];
    let width = hi - lo;
    for &v in values {
        let b = if width > 0.0 {
            (((v - lo) / width) * cfg.bins as f64).floor() as usize
        } else {
            0
        };
        counts[b.min(cfg.bins - 1)] += 1.0;
    }
    let total = values.len() as f64 + cfg.bins as f64 * cfg.smoothing_epsilon;
    counts
        .iter()
        .map(|c| (c + cfg.smoothing_epsilon) / total)
        .collect()
}

/// KL divergence between the empirical distributions of two samples, binned
/// over the union of their ranges.
pub fn histogram_kl(
    actual: &[f64],
    predicted: &[f64],
    cfg: &HistogramKlConfig,
) -> Result<f64, MetricsError> {
    cfg.validate()?;
    if actual.is_empty() || predicted.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if !actual.iter().chain(predicted).all(|x| x.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let (lo, hi) = actual
        .iter()
        .chain(predicted)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let p = smoothed_histogram(actual, lo, hi, cfg);
    let q = smoothed_histogram(predicted, lo, hi, cfg);
    kl_divergence(&p, &q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_give_zero() {
        let x: Vec<f64> = (0..500).map(|i| (i as f64 * 0.1).sin()).collect();
        assert!(
            histogram_kl(&x, &x, &HistogramKlConfig::default())
                .unwrap()
                .abs()
                <= 1e-12
        );
    }

    #[test]
    fn prebinned_example() {
        let v = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn disjoint_supports_are_far_apart() {
        let x: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 100.0).collect();
        let kl = histogram_kl(&x, &y, &HistogramKlConfig::default()).unwrap();
        assert!(kl > 10.0, "{kl}");
    }

    #[test]
    fn constant_inputs() {
        let cfg = HistogramKlConfig::default();
        assert_eq!(histogram_kl(&[2.0; 10], &[2.0; 10], &cfg).unwrap(), 0.0);
        // Different sample counts only differ through the smoothing mass.
        let kl = histogram_kl(&[2.0; 10], &[2.0; 7], &cfg).unwrap();
        assert!((0.0..1e-8).contains(&kl), "{kl}");
    }

    #[test]
    fn empty_input() {
        assert!(matches!(
            histogram_kl(&[], &[1.0], &HistogramKlConfig::default()),
            Err(MetricsError::EmptyInput)
        ));
    }

    #[test]
    fn bad_config() {
        let cfg = HistogramKlConfig {
            bins: 1,
            smoothing_epsilon: 1e-9,
        };
        assert!(histogram_kl(&[1.0], &[1.0], &cfg).is_err());
    }
}
