//! Group-wise quantization onto uniform, logistic or hybrid grids.
//!
//! Each row of a (scaled) weight matrix is cut into contiguous groups of
//! `group_size` input channels. A group is quantized by nearest-level
//! assignment; in hybrid mode the mixing coefficient is chosen from
//! `{k / 20 : k = 0..=20}` by the group's activation output error
//! `sum_t (sum_c (w_c - q_c) x_tc)^2`, or by weight-space squared error when no
//! activations are available.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{grid_for, GroupStats, QuantGrid};
use crate::tensorio::{
    groups_per_row, pack_indices, CalibrationSet, GridKind, GroupParams, QuantizedTensor, WeightTensor,
};

pub const GAMMA_STEPS: usize = 20;

/// `{k / 20 : k = 0..=20}`, each value exactly representable as `f32`.
pub fn gamma_grid() -> Vec<f64> {
    (0..=GAMMA_STEPS).map(|k| f64::from(k as f32 / GAMMA_STEPS as f32)).collect()
}

/// Position of `gamma` on the 21-point grid.
pub fn gamma_bin(gamma: f64) -> usize {
    ((gamma * GAMMA_STEPS as f64).round() as usize).min(GAMMA_STEPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Uniform,
    Logistic,
    Hybrid,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Uniform, Mode::Logistic, Mode::Hybrid];

    pub fn kind(self) -> GridKind {
        match self {
            Mode::Uniform => GridKind::Uniform,
            Mode::Logistic => GridKind::Logistic,
            Mode::Hybrid => GridKind::Hybrid,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Uniform => "uniform",
            Mode::Logistic => "logistic",
            Mode::Hybrid => "hybrid",
        }
    }

    /// Report label of the comparison arm.
    pub fn label(self) -> &'static str {
        match self {
            Mode::Uniform => "awq-uniform",
            Mode::Logistic => "dacq-logistic",
            Mode::Hybrid => "dacq-hybrid",
        }
    }

    /// Candidate mixing coefficients searched in this mode.
    pub fn gammas(self) -> Vec<f64> {
        match self {
            Mode::Uniform => vec![1.0],
            Mode::Logistic => vec![0.0],
            Mode::Hybrid => gamma_grid(),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" | "awq-uniform" | "awq" => Ok(Mode::Uniform),
            "logistic" | "dacq-logistic" => Ok(Mode::Logistic),
            "hybrid" | "dacq-hybrid" | "dacq" => Ok(Mode::Hybrid),
            other => Err(Error::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub group_size: usize,
    pub mode: Mode,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { bits: 4, group_size: 128, mode: Mode::Hybrid }
    }
}

impl QuantConfig {
    pub fn levels(&self) -> usize {
        1usize << self.bits
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 2 | 3 | 4 | 8) {
            return Err(Error::invalid(format!("bits must be one of 2, 3, 4, 8; got {}", self.bits)));
        }
        if self.group_size == 0 {
            return Err(Error::invalid("group_size must be at least 1"));
        }
        Ok(())
    }
}

/// What the mixing search minimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    ActivationError,
    WeightMse,
}

/// Activation columns for one group, `tokens x width` row-major, already
/// divided by the channel scales in effect.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBlock {
    pub tokens: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ActivationBlock {
    pub fn new(tokens: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != tokens * width {
            return Err(Error::ShapeMismatch(format!(
                "activation block {tokens} x {width} needs {} values, got {}",
                tokens * width,
                data.len()
            )));
        }
        Ok(Self { tokens, width, data })
    }

    /// Columns `[col_start, col_start + width)` of `cal`, each divided by `scales[c]`.
    pub fn from_calibration(cal: &CalibrationSet, col_start: usize, width: usize, scales: &[f32]) -> Self {
        let mut data = Vec::with_capacity(cal.tokens * width);
        for t in 0..cal.tokens {
            let row = &cal.token(t)[col_start..col_start + width];
            for (k, &a) in row.iter().enumerate() {
                data.push(f64::from(a) / f64::from(scales[col_start + k]));
            }
        }
        Self { tokens: cal.tokens, width, data }
    }

    pub fn token(&self, t: usize) -> &[f64] {
        &self.data[t * self.width..(t + 1) * self.width]
    }
}

/// One contiguous group of a row.
#[derive(Debug, Clone, Copy)]
pub struct GroupView<'a> {
    pub row: usize,
    pub col_start: usize,
    pub values: &'a [f64],
    pub activations: Option<&'a ActivationBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSearchResult {
    pub gamma_star: f64,
    /// `(gamma, E(gamma))` for every candidate, in search order.
    pub errors: Vec<(f64, f64)>,
    pub chosen_grid: QuantGrid,
    pub objective: Objective,
}

impl GammaSearchResult {
    pub fn best_error(&self) -> f64 {
        self.errors
            .iter()
            .find(|(g, _)| *g == self.gamma_star)
            .map(|(_, e)| *e)
            .expect("gamma_star is one of the candidates")
    }

    pub fn error_at(&self, gamma: f64) -> Option<f64> {
        self.errors.iter().find(|(g, _)| *g == gamma).map(|(_, e)| *e)
    }
}

/// Index of the level closest to `w`; ties go to the lower index.
pub fn nearest_level(w: f64, levels: &[f64]) -> usize {
    let hi = levels.partition_point(|&l| l < w);
    if hi == 0 {
        return 0;
    }
    if hi == levels.len() {
        let top = levels[hi - 1];
        return levels.partition_point(|&l| l < top);
    }
    let lo_value = levels[hi - 1];
    let lo = levels.partition_point(|&l| l < lo_value);
    if (w - lo_value).abs() <= (levels[hi] - w).abs() {
        lo
    } else {
        hi
    }
}

/// Nearest-level assignment by binary search over the sorted grid.
pub fn assign_nearest(w: &[f64], grid: &QuantGrid) -> Vec<u8> {
    assert!(!grid.levels.is_empty() && grid.levels.len() <= 256, "grid must have 1..=256 levels");
    w.iter().map(|&v| nearest_level(v, &grid.levels) as u8).collect()
}

/// `sum_t (sum_c (w_c - w_q,c) x_tc)^2`.
pub fn activation_error(w: &[f64], w_q: &[f64], x: &ActivationBlock) -> Result<f64> {
    if w.len() != w_q.len() || w.len() != x.width {
        return Err(Error::ShapeMismatch(format!(
            "weights {}, quantized {}, activation width {}",
            w.len(),
            w_q.len(),
            x.width
        )));
    }
    let diff: Vec<f64> = w.iter().zip(w_q).map(|(a, b)| a - b).collect();
    Ok(residual_energy(&diff, x))
}

fn residual_energy(diff: &[f64], x: &ActivationBlock) -> f64 {
    (0..x.tokens)
        .map(|t| {
            let dot: f64 = diff.iter().zip(x.token(t)).map(|(d, a)| d * a).sum();
            dot * dot
        })
        .sum()
}

fn weight_sse(diff: &[f64]) -> f64 {
    diff.iter().map(|d| d * d).sum()
}

/// Quantizes one group over the candidate mixing coefficients.
///
/// `gammas` must be ascending; the smallest coefficient wins ties. Without an
/// activation block (or with zero tokens) the search falls back to weight-space
/// squared error.
pub fn quantize_group(
    view: &GroupView<'_>,
    levels: usize,
    gammas: &[f64],
    kind: GridKind,
) -> Result<(GammaSearchResult, Vec<u8>, GroupParams)> {
    if gammas.is_empty() {
        return Err(Error::invalid("empty gamma grid"));
    }
    let stats = GroupStats::from_values(view.values)?.storable();
    let block = view.activations.filter(|b| b.tokens > 0);
    if let Some(b) = block {
        if b.width != view.values.len() {
            return Err(Error::ShapeMismatch(format!(
                "group of {} values with {} activation columns",
                view.values.len(),
                b.width
            )));
        }
    }
    let objective = if block.is_some() { Objective::ActivationError } else { Objective::WeightMse };

    let mut errors = Vec::with_capacity(gammas.len());
    let mut best: Option<(f64, f64, QuantGrid, Vec<u8>)> = None;
    let mut diff = vec![0.0; view.values.len()];
    for &gamma in gammas {
        let grid = grid_for(&stats, levels, kind, gamma)?;
        let idx = assign_nearest(view.values, &grid);
        for ((d, &w), &i) in diff.iter_mut().zip(view.values).zip(&idx) {
            *d = w - grid.levels[usize::from(i)];
        }
        let err = match block {
            Some(b) => residual_energy(&diff, b),
            None => weight_sse(&diff),
        };
        errors.push((gamma, err));
        if best.as_ref().is_none_or(|(_, e, _, _)| err < *e) {
            best = Some((gamma, err, grid, idx));
        }
    }
    let (gamma_star, _, chosen_grid, indices) = best.expect("at least one candidate");
    let params = GroupParams {
        mu: stats.mu as f32,
        sigma: stats.sigma as f32,
        w_min: stats.w_min as f32,
        w_max: stats.w_max as f32,
        gamma: gamma_star as f32,
        kind,
        degenerate: chosen_grid.degenerate,
        mse_fallback: objective == Objective::WeightMse,
    };
    Ok((GammaSearchResult { gamma_star, errors, chosen_grid, objective }, indices, params))
}

/// Quantized tensor plus the per-group search records that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantOutcome {
    pub tensor: QuantizedTensor,
    /// Search record per group, row-major group order.
    pub searches: Vec<GammaSearchResult>,
    pub objective: Objective,
}

impl QuantOutcome {
    /// Sum of the chosen per-group errors (activation or weight-space, per `objective`).
    pub fn total_error(&self) -> f64 {
        self.searches.iter().map(GammaSearchResult::best_error).sum()
    }

    pub fn gamma_histogram(&self) -> [u64; GAMMA_STEPS + 1] {
        let mut h = [0u64; GAMMA_STEPS + 1];
        for s in &self.searches {
            h[gamma_bin(s.gamma_star)] += 1;
        }
        h
    }
}

/// Quantizes with unit channel scales.
pub fn quantize_tensor(t: &WeightTensor, cal: Option<&CalibrationSet>, cfg: &QuantConfig) -> Result<QuantOutcome> {
    quantize_tensor_scaled(t, cal, cfg, &vec![1.0; t.cols])
}

/// Quantizes `t * diag(scales)`; activations are divided by the same scales so
/// the search objective still measures error on the original layer output.
pub fn quantize_tensor_scaled(
    t: &WeightTensor,
    cal: Option<&CalibrationSet>,
    cfg: &QuantConfig,
    scales: &[f32],
) -> Result<QuantOutcome> {
    cfg.validate()?;
    if scales.len() != t.cols {
        return Err(Error::ShapeMismatch(format!("{} scales for {} columns", scales.len(), t.cols)));
    }
    if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::invalid(format!("channel scale {s} must be positive and finite")));
    }
    if let Some(cal) = cal {
        cal.check_matches(t)?;
    }
    let g = cfg.group_size;
    let gpr = groups_per_row(t.cols, g);
    let spans: Vec<(usize, usize)> = (0..gpr).map(|k| (k * g, g.min(t.cols - k * g))).collect();
    let blocks: Option<Vec<ActivationBlock>> = cal.filter(|c| !c.is_empty()).map(|c| {
        spans.iter().map(|&(start, width)| ActivationBlock::from_calibration(c, start, width, scales)).collect()
    });
    let objective = if blocks.is_some() { Objective::ActivationError } else { Objective::WeightMse };
    let gammas = cfg.mode.gammas();
    let kind = cfg.mode.kind();
    let levels = cfg.levels();

    let rows: Vec<RowResult> = (0..t.rows)
        .into_par_iter()
        .map(|r| {
            let scaled: Vec<f64> = t.row(r).iter().zip(scales).map(|(&w, &s)| f64::from(w) * f64::from(s)).collect();
            let mut out = RowResult {
                indices: Vec::with_capacity(t.cols),
                params: Vec::with_capacity(gpr),
                searches: Vec::with_capacity(gpr),
            };
            for (k, &(start, width)) in spans.iter().enumerate() {
                let view = GroupView {
                    row: r,
                    col_start: start,
                    values: &scaled[start..start + width],
                    activations: blocks.as_ref().map(|b| &b[k]),
                };
                let (search, idx, params) = quantize_group(&view, levels, &gammas, kind)?;
                out.indices.extend_from_slice(&idx);
                out.params.push(params);
                out.searches.push(search);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut indices = Vec::with_capacity(t.len());
    let mut group_params = Vec::with_capacity(t.rows * gpr);
    let mut searches = Vec::with_capacity(t.rows * gpr);
    for row in rows {
        indices.extend(row.indices);
        group_params.extend(row.params);
        searches.extend(row.searches);
    }
    let tensor = QuantizedTensor {
        name: t.name.clone(),
        rows: t.rows,
        cols: t.cols,
        group_size: g,
        bits: cfg.bits,
        packed: pack_indices(&indices, cfg.bits)?,
        group_params,
        channel_scales: scales.to_vec(),
    };
    Ok(QuantOutcome { tensor, searches, objective })
}

struct RowResult {
    indices: Vec<u8>,
    params: Vec<GroupParams>,
    searches: Vec<GammaSearchResult>,
}

fn stats_of(gp: &GroupParams, n: usize) -> GroupStats {
    GroupStats {
        mu: f64::from(gp.mu),
        sigma: f64::from(gp.sigma),
        w_min: f64::from(gp.w_min),
        w_max: f64::from(gp.w_max),
        n,
    }
}

/// Regenerates each group's grid from its stored parameters, looks up the
/// levels and divides out the channel scales.
pub fn dequantize(qt: &QuantizedTensor) -> Result<WeightTensor> {
    qt.validate()?;
    let indices = qt.indices()?;
    let levels = qt.levels();
    let gpr = qt.groups_per_row();
    let mut data = vec![0f32; qt.rows * qt.cols];
    for r in 0..qt.rows {
        for k in 0..gpr {
            let start = k * qt.group_size;
            let width = qt.group_size.min(qt.cols - start);
            let gp = &qt.group_params[r * gpr + k];
            let grid = grid_for(&stats_of(gp, width), levels, gp.kind, f64::from(gp.gamma))?;
            for c in start..start + width {
                let level = grid.levels[usize::from(indices[r * qt.cols + c])];
                data[r * qt.cols + c] = (level / f64::from(qt.channel_scales[c])) as f32;
            }
        }
    }
    WeightTensor::new(qt.name.clone(), qt.rows, qt.cols, data)
        .map_err(|e| Error::Invariant(format!("dequantized values are not finite: {e}")))
}

// ---------------------------------------------------------------------------
// Reference oracle
// ---------------------------------------------------------------------------

/// Result of companding a group through its fitted logistic CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct CompandingOracle {
    /// Inverse-CDF images of the cell centres `(j + 0.5) / J`.
    pub centers: Vec<f64>,
    /// Cell index of each weight in the probability domain.
    pub indices: Vec<u8>,
}

/// Maps each weight through the moment-fitted logistic CDF, bins the
/// probabilities into `J` equal cells and maps the cell centres back.
///
/// This is the explicit companding route; it is used to check the closed-form
/// logistic grid and to measure how often CDF-domain binning and real-domain
/// nearest-level assignment disagree.
pub fn empirical_companding_oracle(w: &[f64], levels: usize) -> Result<CompandingOracle> {
    if w.is_empty() || w.len() > 4096 {
        return Err(Error::invalid(format!("oracle group size must be 1..=4096, got {}", w.len())));
    }
    if !(2..=256).contains(&levels) {
        return Err(Error::invalid(format!("oracle level count must be 2..=256, got {levels}")));
    }
    let n = w.len() as f64;
    let mu = w.iter().sum::<f64>() / n;
    let sigma = (w.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
    Ok(CompandingOracle {
        centers: companding_cell_centers(mu, sigma, levels),
        indices: w.iter().map(|&v| companding_cell(v, mu, sigma, levels) as u8).collect(),
    })
}

/// `mu - theta * ln(1/p - 1)` with `theta = sigma * sqrt(3) / pi`.
pub fn companding_cell_centers(mu: f64, sigma: f64, levels: usize) -> Vec<f64> {
    let theta = sigma * 3f64.sqrt() / std::f64::consts::PI;
    (0..levels)
        .map(|j| {
            let p = (j as f64 + 0.5) / levels as f64;
            mu - theta * (1.0 / p - 1.0).ln()
        })
        .collect()
}

fn companding_cell(w: f64, mu: f64, sigma: f64, levels: usize) -> usize {
    let theta = sigma * 3f64.sqrt() / std::f64::consts::PI;
    let u = if theta > 0.0 { 1.0 / (1.0 + (-(w - mu) / theta).exp()) } else { 0.5 };
    ((u * levels as f64).floor() as usize).min(levels - 1)
}
