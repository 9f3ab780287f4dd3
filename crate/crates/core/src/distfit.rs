//! Quantile-space goodness of fit against zero-mean, unit-variance references.
//!
//! Samples are standardized with the population standard deviation, then
//! their empirical quantiles are compared with Normal, Laplace (`b = 1/sqrt 2`)
//! and Logistic (`s = sqrt 3 / pi`) inverse CDFs at `m` probe probabilities
//! `(k + 0.5) / m`.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::tensorio::WeightTensor;

pub const DEFAULT_PROBES: usize = 1000;
pub const DEFAULT_SAMPLE: usize = 1_000_000;

/// Logistic scale giving unit variance.
pub const LOGISTIC_UNIT_SCALE: f64 = 0.551_328_895_421_792_1; // sqrt(3) / pi
/// Laplace scale giving unit variance.
pub const LAPLACE_UNIT_SCALE: f64 = FRAC_1_SQRT_2;

/// Reference families, declared in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Normal,
    Laplace,
    Logistic,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Normal, Family::Laplace, Family::Logistic];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Normal => "normal",
            Family::Laplace => "laplace",
            Family::Logistic => "logistic",
        }
    }

    /// Inverse CDF of the unit-variance reference. `p` must lie in (0, 1).
    pub fn quantile(self, p: f64) -> f64 {
        match self {
            Family::Normal => standard_normal().inverse_cdf(p),
            Family::Laplace => {
                let d = p - 0.5;
                -LAPLACE_UNIT_SCALE * d.signum() * (1.0 - 2.0 * d.abs()).ln()
            }
            Family::Logistic => LOGISTIC_UNIT_SCALE * (p / (1.0 - p)).ln(),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(Family::Normal),
            "laplace" => Ok(Family::Laplace),
            "logistic" => Ok(Family::Logistic),
            other => Err(Error::invalid(format!("unknown family '{other}'"))),
        }
    }
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal parameters are valid")
}

/// Sorted, standardized sample together with the moments that were removed.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedSample {
    pub values: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
}

impl StandardizedSample {
    /// Wraps values that are already on the standard scale (no rescaling).
    pub fn from_standardized(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        Self { values, mu: 0.0, sigma: 1.0 }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Linear interpolation between order statistics at plotting positions
    /// `(k + 0.5) / n`, clamped to the extremes.
    pub fn quantile(&self, p: f64) -> f64 {
        let v = &self.values;
        let n = v.len();
        let h = p * n as f64 - 0.5;
        if h <= 0.0 {
            return v[0];
        }
        if h >= (n - 1) as f64 {
            return v[n - 1];
        }
        let lo = h.floor() as usize;
        let frac = h - lo as f64;
        v[lo] + frac * (v[lo + 1] - v[lo])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyMetrics {
    pub family: Family,
    pub rmse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub tensor_name: String,
    pub n_samples: usize,
    pub metrics: Vec<FamilyMetrics>,
    pub best_family: Family,
    /// `(theoretical, empirical)` quantiles of the best family at the probes.
    pub qq_pairs: Vec<(f64, f64)>,
}

impl FitReport {
    pub fn metrics_for(&self, family: Family) -> &FamilyMetrics {
        self.metrics.iter().find(|m| m.family == family).expect("all families are reported")
    }
}

/// One row of a Q-Q export.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QqRow {
    pub p: f64,
    pub q_theoretical_normal: f64,
    pub q_theoretical_laplace: f64,
    pub q_theoretical_logistic: f64,
    pub q_empirical: f64,
}

/// Draws `min(n, len)` weights without replacement; all weights when `n >= len`.
pub fn sample_weights(t: &WeightTensor, n: usize, seed: u64) -> Result<Vec<f64>> {
    if t.is_empty() {
        return Err(Error::invalid(format!("tensor '{}' is empty", t.name)));
    }
    if n < 2 {
        return Err(Error::invalid(format!("sample size must be at least 2, got {n}")));
    }
    if n >= t.len() {
        return Ok(t.data.iter().map(|&v| f64::from(v)).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, t.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| f64::from(t.data[i])).collect())
}

/// Removes mean and population standard deviation, returning sorted values.
pub fn standardize(x: &[f64]) -> Result<StandardizedSample> {
    if x.len() < 2 {
        return Err(Error::Degenerate(format!("need at least 2 values, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Degenerate(format!("zero variance (sigma = {sigma})")));
    }
    let mut values: Vec<f64> = x.iter().map(|v| (v - mu) / sigma).collect();
    values.sort_by(f64::total_cmp);
    Ok(StandardizedSample { values, mu, sigma })
}

pub fn theoretical_quantiles(family: Family, probs: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::invalid(format!("probability {p} is not in (0, 1)")));
    }
    Ok(probs.iter().map(|&p| family.quantile(p)).collect())
}

pub fn probe_probabilities(m: usize) -> Vec<f64> {
    (0..m).map(|k| (k as f64 + 0.5) / m as f64).collect()
}

/// RMSE and MAE between the sample's quantiles and an arbitrary reference quantile function.
pub fn fit_metrics_with(s: &StandardizedSample, m: usize, reference: impl Fn(f64) -> f64) -> Result<(f64, f64)> {
    if m < 2 {
        return Err(Error::invalid(format!("probe count must be at least 2, got {m}")));
    }
    if s.is_empty() {
        return Err(Error::Degenerate("empty sample".into()));
    }
    let (mut sq, mut abs) = (0.0, 0.0);
    for p in probe_probabilities(m) {
        let d = s.quantile(p) - reference(p);
        sq += d * d;
        abs += d.abs();
    }
    Ok(((sq / m as f64).sqrt(), abs / m as f64))
}

pub fn quantile_fit_metrics(s: &StandardizedSample, family: Family, m: usize) -> Result<(f64, f64)> {
    fit_metrics_with(s, m, |p| family.quantile(p))
}

/// Picks the family with the lowest RMSE; ties fall to MAE, then declaration order.
pub fn select_best(metrics: &[FamilyMetrics]) -> Family {
    metrics
        .iter()
        .min_by(|a, b| a.rmse.total_cmp(&b.rmse).then(a.mae.total_cmp(&b.mae)).then(a.family.cmp(&b.family)))
        .map(|m| m.family)
        .expect("metrics are non-empty")
}

pub fn fit_sample(name: &str, s: &StandardizedSample, m: usize) -> Result<FitReport> {
    let metrics = Family::ALL
        .iter()
        .map(|&family| quantile_fit_metrics(s, family, m).map(|(rmse, mae)| FamilyMetrics { family, rmse, mae }))
        .collect::<Result<Vec<_>>>()?;
    let best_family = select_best(&metrics);
    let qq_pairs = probe_probabilities(m).into_iter().map(|p| (best_family.quantile(p), s.quantile(p))).collect();
    Ok(FitReport { tensor_name: name.to_string(), n_samples: s.len(), metrics, best_family, qq_pairs })
}

pub fn best_fit(t: &WeightTensor, n: usize, m: usize, seed: u64) -> Result<FitReport> {
    let sample = sample_weights(t, n, seed)?;
    let s = standardize(&sample)?;
    fit_sample(&t.name, &s, m)
}

pub fn qq_table(s: &StandardizedSample, m: usize) -> Vec<QqRow> {
    probe_probabilities(m)
        .into_iter()
        .map(|p| QqRow {
            p,
            q_theoretical_normal: Family::Normal.quantile(p),
            q_theoretical_laplace: Family::Laplace.quantile(p),
            q_theoretical_logistic: Family::Logistic.quantile(p),
            q_empirical: s.quantile(p),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use std::f64::consts::PI;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn tensor(values: Vec<f32>) -> WeightTensor {
        let n = values.len();
        WeightTensor::new("t", 1, n, values).unwrap()
    }

    #[test]
    fn logistic_unit_scale_constant() {
        assert!(close(LOGISTIC_UNIT_SCALE, 3f64.sqrt() / PI, 1e-16));
    }

    #[test]
    fn sample_whole_population() {
        let t = WeightTensor::new("t", 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(sample_weights(&t, 10, 0).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(sample_weights(&t, 1, 0).is_err());
        let empty = WeightTensor::new("e", 0, 0, vec![]).unwrap();
        assert!(sample_weights(&empty, 10, 0).is_err());
    }

    #[test]
    fn sample_is_deterministic_and_without_replacement() {
        let t = tensor((0..1000).map(|i| i as f32).collect());
        let a = sample_weights(&t, 100, 7).unwrap();
        let b = sample_weights(&t, 100, 7).unwrap();
        assert_eq!(a, b);
        let mut dedup = a.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 100);
        assert_ne!(a, sample_weights(&t, 100, 8).unwrap());
    }

    #[test]
    fn standardize_one_two_three() {
        let s = standardize(&[3.0, 1.0, 2.0]).unwrap();
        let r = (1.5f64).sqrt();
        assert!(close(s.values[0], -r, 1e-12));
        assert!(close(s.values[1], 0.0, 1e-12));
        assert!(close(s.values[2], r, 1e-12));
        assert!(close(s.mu, 2.0, 1e-15));
        assert!(close(s.sigma, (2.0f64 / 3.0).sqrt(), 1e-15));
    }

    #[test]
    fn standardize_constant_is_degenerate() {
        assert!(matches!(standardize(&[5.0, 5.0, 5.0]), Err(Error::Degenerate(_))));
        assert!(standardize(&[1.0]).is_err());
    }

    #[test]
    fn standardize_is_idempotent() {
        let x: Vec<f64> = (0..101).map(|i| ((i * 37) % 101) as f64 * 0.3).collect();
        let once = standardize(&x).unwrap();
        let twice = standardize(&once.values).unwrap();
        for (a, b) in once.values.iter().zip(&twice.values) {
            assert!(close(*a, *b, 1e-9));
        }
        let mean = once.values.iter().sum::<f64>() / 101.0;
        let var = once.values.iter().map(|v| v * v).sum::<f64>() / 101.0;
        assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(Family::Logistic.quantile(0.5), 0.0);
        let q = Family::Logistic.quantile(0.75);
        assert!(close(q, 3f64.sqrt() / PI * 3f64.ln(), 1e-14));
        assert!(close(q, 0.6057, 5e-5));
        let l = Family::Laplace.quantile(0.25);
        assert!(close(l, FRAC_1_SQRT_2 * 0.5f64.ln(), 1e-15));
        assert!(close(l, -0.4901, 5e-5));
        assert!(close(Family::Laplace.quantile(0.75), -l, 1e-15));
        // Tabulated probit value.
        assert!(close(Family::Normal.quantile(0.975), 1.959_963_984_540_054, 1e-12));
        assert!(theoretical_quantiles(Family::Normal, &[0.0]).is_err());
        assert!(theoretical_quantiles(Family::Normal, &[1.0]).is_err());
        assert!(theoretical_quantiles(Family::Normal, &[0.5, f64::NAN]).is_err());
    }

    #[test]
    fn quantiles_strictly_increasing() {
        let probs: Vec<f64> = (1..1000).map(|k| k as f64 / 1000.0).collect();
        for family in Family::ALL {
            let q = theoretical_quantiles(family, &probs).unwrap();
            assert!(q.windows(2).all(|w| w[0] < w[1]), "{family} not increasing");
        }
    }

    #[test]
    fn references_have_unit_variance() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let u: Vec<f64> = (0..1_000_000)
            .map(|_| loop {
                let v: f64 = rng.random();
                if v > 0.0 {
                    break v;
                }
            })
            .collect();
        for family in Family::ALL {
            let n = u.len() as f64;
            let x: Vec<f64> = u.iter().map(|&p| family.quantile(p)).collect();
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!((var - 1.0).abs() < 0.02, "{family} variance {var}");
        }
    }

    #[test]
    fn exact_probe_sample_fits_perfectly() {
        let m = 500;
        let values = theoretical_quantiles(Family::Logistic, &probe_probabilities(m)).unwrap();
        let s = StandardizedSample::from_standardized(values);
        let (rmse, mae) = quantile_fit_metrics(&s, Family::Logistic, m).unwrap();
        assert!(rmse < 1e-12 && mae < 1e-12);
        let (rmse_n, _) = quantile_fit_metrics(&s, Family::Normal, m).unwrap();
        assert!(rmse_n > 0.01);
    }

    #[test]
    fn self_comparison_is_zero() {
        let s = standardize(&synth::family_sample(Family::Laplace, 5000, 3)).unwrap();
        let (rmse, mae) = fit_metrics_with(&s, 777, |p| s.quantile(p)).unwrap();
        assert_eq!((rmse, mae), (0.0, 0.0));
        assert!(fit_metrics_with(&s, 1, |p| p).is_err());
    }

    #[test]
    fn affine_invariance() {
        let x = synth::family_sample(Family::Logistic, 20_000, 11);
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 7.0).collect();
        let sx = standardize(&x).unwrap();
        let sy = standardize(&y).unwrap();
        for family in Family::ALL {
            let a = quantile_fit_metrics(&sx, family, DEFAULT_PROBES).unwrap();
            let b = quantile_fit_metrics(&sy, family, DEFAULT_PROBES).unwrap();
            assert!(close(a.0, b.0, 1e-9) && close(a.1, b.1, 1e-9));
        }
    }

    #[test]
    fn normal_draws_prefer_normal_over_laplace() {
        for seed in [1, 2, 3] {
            let s = standardize(&synth::family_sample(Family::Normal, 100_000, seed)).unwrap();
            let (normal, _) = quantile_fit_metrics(&s, Family::Normal, DEFAULT_PROBES).unwrap();
            let (laplace, _) = quantile_fit_metrics(&s, Family::Laplace, DEFAULT_PROBES).unwrap();
            assert!(normal < laplace, "seed {seed}: {normal} vs {laplace}");
        }
    }

    #[test]
    fn best_fit_identifies_each_family() {
        for family in Family::ALL {
            for seed in [10, 20, 30] {
                let t = synth::family_tensor("t", family, 100, 1000, 0.02, seed).unwrap();
                let report = best_fit(&t, 100_000, DEFAULT_PROBES, seed).unwrap();
                assert_eq!(report.best_family, family, "seed {seed}");
                assert_eq!(report.metrics.len(), 3);
                assert_eq!(report.qq_pairs.len(), DEFAULT_PROBES);
            }
        }
    }

    #[test]
    fn tie_break_order() {
        let m = |family, rmse, mae| FamilyMetrics { family, rmse, mae };
        let tied = [m(Family::Logistic, 0.1, 0.2), m(Family::Laplace, 0.1, 0.2), m(Family::Normal, 0.1, 0.2)];
        assert_eq!(select_best(&tied), Family::Normal);
        let by_mae = [m(Family::Normal, 0.1, 0.3), m(Family::Logistic, 0.1, 0.2)];
        assert_eq!(select_best(&by_mae), Family::Logistic);
    }

    #[test]
    fn degenerate_tensor_errors() {
        let t = tensor(vec![0.25; 64]);
        assert!(matches!(best_fit(&t, 100, 10, 0), Err(Error::Degenerate(_))));
    }
}
