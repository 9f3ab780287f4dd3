//! Reconstruction-level construction for one weight group.
//!
//! All grids have `J = 2^b` levels sorted ascending. Logistic levels are the
//! inverse-CDF values of a logistic fitted by moments, taken at the cell
//! midpoints `(j + 0.5) / J`; they are never clamped to the group's range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::GridKind;

/// `sqrt(3) / pi`: logistic scale per unit standard deviation.
const THETA_PER_SIGMA: f64 = 0.551_328_895_421_792_1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub n: usize,
}

impl GroupStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("group is empty"));
        }
        let n = values.len();
        let (mut w_min, mut w_max) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut sum = 0.0;
        for &v in values {
            w_min = w_min.min(v);
            w_max = w_max.max(v);
            sum += v;
        }
        if w_min == w_max {
            return Ok(Self { mu: w_min, sigma: 0.0, w_min, w_max, n });
        }
        let mu = (sum / n as f64).clamp(w_min, w_max);
        let var = values.iter().map(|&v| (v - mu).powi(2)).sum::<f64>() / n as f64;
        Ok(Self { mu, sigma: var.sqrt(), w_min, w_max, n })
    }

    /// A constant group: every grid collapses onto one value.
    pub fn is_degenerate(&self) -> bool {
        self.w_min == self.w_max
    }

    /// Rounds every field to `f32` so the stats survive serialization unchanged.
    pub fn storable(self) -> Self {
        let w_min = self.w_min as f32 as f64;
        let w_max = self.w_max as f32 as f64;
        if w_min == w_max {
            return Self { mu: w_min, sigma: 0.0, w_min, w_max, n: self.n };
        }
        let mu = (self.mu as f32 as f64).clamp(w_min, w_max);
        let sigma = self.sigma as f32 as f64;
        Self { mu, sigma, w_min, w_max, n: self.n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantGrid {
    pub levels: Vec<f64>,
    pub kind: GridKind,
    /// Mixing coefficient: 0 for logistic, 1 for uniform.
    pub gamma: f64,
    pub degenerate: bool,
}

impl QuantGrid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn max_gap(&self) -> f64 {
        self.levels.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

fn check_levels(j: usize) -> Result<()> {
    if j < 2 {
        return Err(Error::invalid(format!("need at least 2 levels, got {j}")));
    }
    Ok(())
}

pub fn uniform_levels(stats: &GroupStats, j: usize) -> Result<QuantGrid> {
    check_levels(j)?;
    if stats.w_min > stats.w_max {
        return Err(Error::invalid(format!("w_min {} > w_max {}", stats.w_min, stats.w_max)));
    }
    let step = (stats.w_max - stats.w_min) / (j - 1) as f64;
    let mut levels: Vec<f64> = (0..j).map(|i| stats.w_min + step * i as f64).collect();
    levels[j - 1] = stats.w_max;
    Ok(QuantGrid { levels, kind: GridKind::Uniform, gamma: 1.0, degenerate: stats.is_degenerate() })
}

/// `ln(p / (1 - p))` at `p = (i + 0.5) / J`, formed as a ratio of half-integers.
fn midpoint_logit(i: usize, j: usize) -> f64 {
    let i = i as f64;
    ((i + 0.5) / (j as f64 - i - 0.5)).ln()
}

pub fn logistic_levels(stats: &GroupStats, j: usize) -> Result<QuantGrid> {
    check_levels(j)?;
    if stats.sigma == 0.0 {
        return Ok(QuantGrid { levels: vec![stats.mu; j], kind: GridKind::Logistic, gamma: 0.0, degenerate: true });
    }
    if stats.sigma.is_nan() || stats.sigma < 0.0 {
        return Err(Error::invalid(format!("sigma {} must be non-negative", stats.sigma)));
    }
    let theta = stats.sigma * THETA_PER_SIGMA;
    let levels = (0..j).map(|i| stats.mu + theta * midpoint_logit(i, j)).collect();
    Ok(QuantGrid { levels, kind: GridKind::Logistic, gamma: 0.0, degenerate: stats.is_degenerate() })
}

/// `(1 - gamma) * logistic + gamma * uniform`, element-wise.
pub fn hybrid_levels(stats: &GroupStats, j: usize, gamma: f64) -> Result<QuantGrid> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma {gamma} outside [0, 1]")));
    }
    let uni = uniform_levels(stats, j)?;
    if uni.degenerate {
        return Ok(QuantGrid { levels: vec![stats.w_min; j], kind: GridKind::Hybrid, gamma, degenerate: true });
    }
    let logis = logistic_levels(stats, j)?;
    let levels = logis.levels.iter().zip(&uni.levels).map(|(l, u)| (1.0 - gamma) * l + gamma * u).collect();
    Ok(QuantGrid { levels, kind: GridKind::Hybrid, gamma, degenerate: logis.degenerate })
}

/// Regenerates the grid a group was quantized with.
pub fn grid_for(stats: &GroupStats, j: usize, kind: GridKind, gamma: f64) -> Result<QuantGrid> {
    match kind {
        GridKind::Uniform => uniform_levels(stats, j),
        GridKind::Logistic => logistic_levels(stats, j),
        GridKind::Hybrid => hybrid_levels(stats, j, gamma),
    }
}
