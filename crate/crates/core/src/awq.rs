//! Activation-aware per-channel scaling.
//!
//! Channel importance is the mean absolute activation `S_c`. Candidate scales
//! are `S^alpha` for `alpha in {k / 20 : k = 0..=19}`; each candidate scales the
//! weight columns, quantizes, divides the scales back out and is scored by the
//! squared Frobenius error of the layer output on the calibration tokens.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{dequantize, quantize_tensor_scaled, QuantConfig, QuantOutcome};
use crate::tensorio::{CalibrationSet, WeightTensor};

pub const ALPHA_STEPS: usize = 20;

/// `{k / 20 : k = 0..=19}`. The top of the range (alpha = 1) is not a candidate.
pub fn alpha_grid() -> Vec<f64> {
    (0..ALPHA_STEPS).map(|k| f64::from(k as f32 / ALPHA_STEPS as f32)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    /// Mean absolute activation per input channel.
    pub s_vec: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSearchResult {
    pub alpha_star: f64,
    /// `(alpha, L(alpha))` for all 20 candidates.
    pub losses: Vec<(f64, f64)>,
    pub scale_star: Vec<f32>,
    /// Quantization obtained at `alpha_star`.
    pub best: QuantOutcome,
}

impl AlphaSearchResult {
    pub fn best_loss(&self) -> f64 {
        self.losses.iter().find(|(a, _)| *a == self.alpha_star).map(|(_, l)| *l).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalienceReport {
    /// Column with the largest mean |w|.
    pub weight_argmax: usize,
    /// Column with the largest mean |activation|.
    pub activation_argmax: usize,
    pub weight_column_mean_abs: Vec<f64>,
}

pub fn channel_stats(cal: &CalibrationSet) -> Result<ChannelStats> {
    if cal.tokens == 0 {
        return Err(Error::invalid(format!("calibration set '{}' has no tokens", cal.layer_name)));
    }
    let mut s_vec = vec![0.0f64; cal.cols];
    for t in 0..cal.tokens {
        for (acc, &a) in s_vec.iter_mut().zip(cal.token(t)) {
            *acc += f64::from(a).abs();
        }
    }
    let n = cal.tokens as f64;
    s_vec.iter_mut().for_each(|s| *s /= n);
    Ok(ChannelStats { s_vec })
}

/// `S^alpha` per channel; dead channels (`S = 0`) keep scale 1.
pub fn scales_for_alpha(stats: &ChannelStats, alpha: f64) -> Vec<f32> {
    stats
        .s_vec
        .iter()
        .map(|&s| if s == 0.0 { 1.0 } else { (s.powf(alpha) as f32).clamp(f32::MIN_POSITIVE, f32::MAX) })
        .collect()
}

fn check_scales(t: &WeightTensor, s: &[f32]) -> Result<()> {
    if s.len() != t.cols {
        return Err(Error::ShapeMismatch(format!("{} scales for {} columns", s.len(), t.cols)));
    }
    if let Some(v) = s.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::invalid(format!("scale {v} must be positive and finite")));
    }
    Ok(())
}

/// Multiplies column `c` by `s[c]`.
pub fn apply_scale(t: &WeightTensor, s: &[f32]) -> Result<WeightTensor> {
    check_scales(t, s)?;
    let data = t
        .data
        .chunks(t.cols.max(1))
        .flat_map(|row| row.iter().zip(s).map(|(&w, &sc)| (f64::from(w) * f64::from(sc)) as f32))
        .collect();
    WeightTensor::new(t.name.clone(), t.rows, t.cols, data)
}

/// Divides column `c` by `s[c]`.
pub fn remove_scale(t: &WeightTensor, s: &[f32]) -> Result<WeightTensor> {
    check_scales(t, s)?;
    let data = t
        .data
        .chunks(t.cols.max(1))
        .flat_map(|row| row.iter().zip(s).map(|(&w, &sc)| (f64::from(w) / f64::from(sc)) as f32))
        .collect();
    WeightTensor::new(t.name.clone(), t.rows, t.cols, data)
}

/// `|| W_hat A^T - W A^T ||_F^2` over the calibration tokens.
pub fn output_error(orig: &WeightTensor, recon: &WeightTensor, cal: &CalibrationSet) -> Result<f64> {
    if (orig.rows, orig.cols) != (recon.rows, recon.cols) {
        return Err(Error::ShapeMismatch(format!("{}x{} vs {}x{}", orig.rows, orig.cols, recon.rows, recon.cols)));
    }
    cal.check_matches(orig)?;
    let per_row: Vec<f64> = (0..orig.rows)
        .into_par_iter()
        .map(|r| {
            let diff: Vec<f64> =
                orig.row(r).iter().zip(recon.row(r)).map(|(&a, &b)| f64::from(a) - f64::from(b)).collect();
            (0..cal.tokens)
                .map(|t| {
                    let dot: f64 = diff.iter().zip(cal.token(t)).map(|(d, &a)| d * f64::from(a)).sum();
                    dot * dot
                })
                .sum()
        })
        .collect();
    Ok(per_row.iter().sum())
}

/// Exhaustive search over the 20 alpha candidates; ties keep the smaller alpha.
pub fn alpha_search(
    t: &WeightTensor,
    cal: &CalibrationSet,
    stats: &ChannelStats,
    cfg: &QuantConfig,
) -> Result<AlphaSearchResult> {
    cal.check_matches(t)?;
    if stats.s_vec.len() != t.cols {
        return Err(Error::ShapeMismatch(format!("{} channel statistics for {} columns", stats.s_vec.len(), t.cols)));
    }
    let mut losses = Vec::with_capacity(ALPHA_STEPS);
    let mut best: Option<(f64, f64, Vec<f32>, QuantOutcome)> = None;
    for alpha in alpha_grid() {
        let scales = scales_for_alpha(stats, alpha);
        let outcome = quantize_tensor_scaled(t, Some(cal), cfg, &scales)?;
        let recon = dequantize(&outcome.tensor)?;
        let loss = output_error(t, &recon, cal)?;
        losses.push((alpha, loss));
        if best.as_ref().is_none_or(|(_, l, _, _)| loss < *l) {
            best = Some((alpha, loss, scales, outcome));
        }
    }
    let (alpha_star, _, scale_star, best) = best.expect("alpha grid is non-empty");
    Ok(AlphaSearchResult { alpha_star, losses, scale_star, best })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn salience_report(t: &WeightTensor, stats: &ChannelStats) -> Result<SalienceReport> {
    if stats.s_vec.len() != t.cols {
        return Err(Error::ShapeMismatch(format!("{} statistics for {} columns", stats.s_vec.len(), t.cols)));
    }
    let mut col = vec![0.0f64; t.cols];
    for r in 0..t.rows {
        for (acc, &w) in col.iter_mut().zip(t.row(r)) {
            *acc += f64::from(w).abs();
        }
    }
    if t.rows > 0 {
        col.iter_mut().for_each(|c| *c /= t.rows as f64);
    }
    Ok(SalienceReport {
        weight_argmax: argmax(&col),
        activation_argmax: argmax(&stats.s_vec),
        weight_column_mean_abs: col,
    })
}
