//! Reconstruction and output-error reporting across quantization modes.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::awq::{alpha_search, channel_stats, output_error, scales_for_alpha};
use crate::error::{Error, Result};
use crate::grids::{grid_for, GroupStats, QuantGrid};
use crate::quantizer::{
    dequantize, gamma_bin, quantize_tensor_scaled, Mode, Objective, QuantConfig, QuantOutcome, GAMMA_STEPS,
};
use crate::tensorio::{load_any, load_calibration, CalibrationSet, GridKind, QuantizedTensor, WeightTensor};

/// How the channel scales of a record were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// alpha searched for this mode alone.
    Searched,
    /// alpha shared by all modes (the uniform arm's alpha*).
    FixedAlpha,
    /// No scaling (alpha = 0).
    Direct,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Searched => "searched",
            Protocol::FixedAlpha => "fixed-alpha",
            Protocol::Direct => "direct",
        }
    }
}

mod mode_label {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::quantizer::Mode;

    pub fn serialize<S: Serializer>(m: &Mode, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(m.label())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mode, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub tensor_name: String,
    #[serde(with = "mode_label")]
    pub mode: Mode,
    pub protocol: Protocol,
    /// Mean squared error against the original weights.
    pub mse: f64,
    pub mae: f64,
    /// Sum over groups of the group output error on its own column slice.
    /// `None` when no calibration activations were available.
    pub activation_error: Option<f64>,
    /// `||(W - W_hat) A^T||_F^2` over the full rows.
    pub output_error: Option<f64>,
    pub gamma_histogram: Vec<u64>,
    pub alpha_star: f64,
    /// Set when the mixing search fell back to weight-space error.
    pub fallback: bool,
}

impl EvalRecord {
    /// Scores `outcome` against the original tensor.
    pub fn from_outcome(
        orig: &WeightTensor,
        outcome: &QuantOutcome,
        cal: Option<&CalibrationSet>,
        mode: Mode,
        protocol: Protocol,
        alpha_star: f64,
    ) -> Result<Self> {
        let recon = dequantize(&outcome.tensor)?;
        let (mse, mae) = reconstruction_metrics(orig, &recon)?;
        let fallback = outcome.objective == Objective::WeightMse;
        let activation_error = (!fallback).then(|| outcome.total_error());
        let output_error = match cal.filter(|c| !c.is_empty()) {
            Some(c) => Some(output_error(orig, &recon, c)?),
            None => None,
        };
        Ok(Self {
            tensor_name: orig.name.clone(),
            mode,
            protocol,
            mse,
            mae,
            activation_error,
            output_error,
            gamma_histogram: outcome.gamma_histogram().to_vec(),
            alpha_star,
            fallback,
        })
    }
}

pub fn reconstruction_metrics(orig: &WeightTensor, recon: &WeightTensor) -> Result<(f64, f64)> {
    if (orig.rows, orig.cols) != (recon.rows, recon.cols) {
        return Err(Error::ShapeMismatch(format!(
            "original is {}x{}, reconstruction is {}x{}",
            orig.rows, orig.cols, recon.rows, recon.cols
        )));
    }
    if orig.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut se, mut ae) = (0.0f64, 0.0f64);
    for (&a, &b) in orig.data.iter().zip(&recon.data) {
        let d = f64::from(a) - f64::from(b);
        se += d * d;
        ae += d.abs();
    }
    let n = orig.len() as f64;
    Ok((se / n, ae / n))
}

/// Sum over groups of `sum_t (sum_c (w_c - w_hat_c) a_tc)^2` on each group's own columns.
pub fn group_activation_error(
    orig: &WeightTensor,
    recon: &WeightTensor,
    cal: &CalibrationSet,
    group_size: usize,
) -> Result<f64> {
    if (orig.rows, orig.cols) != (recon.rows, recon.cols) {
        return Err(Error::ShapeMismatch(format!(
            "original is {}x{}, reconstruction is {}x{}",
            orig.rows, orig.cols, recon.rows, recon.cols
        )));
    }
    cal.check_matches(orig)?;
    if group_size == 0 {
        return Err(Error::invalid("group_size must be at least 1"));
    }
    let per_row: Vec<f64> = (0..orig.rows)
        .into_par_iter()
        .map(|r| {
            let d: Vec<f64> =
                orig.row(r).iter().zip(recon.row(r)).map(|(&a, &b)| f64::from(a) - f64::from(b)).collect();
            let mut total = 0.0;
            for start in (0..orig.cols).step_by(group_size) {
                let end = (start + group_size).min(orig.cols);
                for t in 0..cal.tokens {
                    let a = &cal.token(t)[start..end];
                    let dot: f64 = d[start..end].iter().zip(a).map(|(x, &y)| x * f64::from(y)).sum();
                    total += dot * dot;
                }
            }
            total
        })
        .collect();
    Ok(per_row.iter().sum())
}

/// Scores a stored artifact against its original tensor.
///
/// Unlike [`EvalRecord::from_outcome`], the activation error here is measured
/// on the `f32` reconstruction, since the search records are not stored.
pub fn record_from_artifact(
    orig: &WeightTensor,
    qt: &QuantizedTensor,
    cal: Option<&CalibrationSet>,
    mode: Mode,
    protocol: Protocol,
    alpha_star: f64,
) -> Result<EvalRecord> {
    if (orig.rows, orig.cols) != (qt.rows, qt.cols) {
        return Err(Error::ShapeMismatch(format!(
            "artifact '{}' is {}x{}, original is {}x{}",
            qt.name, qt.rows, qt.cols, orig.rows, orig.cols
        )));
    }
    let recon = dequantize(qt)?;
    let (mse, mae) = reconstruction_metrics(orig, &recon)?;
    let cal = cal.filter(|c| !c.is_empty());
    let (activation_error, output_error) = match cal {
        Some(c) => {
            (Some(group_activation_error(orig, &recon, c, qt.group_size)?), Some(output_error(orig, &recon, c)?))
        }
        None => (None, None),
    };
    let mut gamma_histogram = vec![0u64; GAMMA_STEPS + 1];
    for gp in &qt.group_params {
        gamma_histogram[gamma_bin(f64::from(gp.gamma))] += 1;
    }
    Ok(EvalRecord {
        tensor_name: orig.name.clone(),
        mode,
        protocol,
        mse,
        mae,
        activation_error,
        output_error,
        gamma_histogram,
        alpha_star,
        fallback: qt.group_params.iter().any(|g| g.mse_fallback),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub bits: u8,
    pub group_size: usize,
    pub alpha_search: bool,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self { bits: 4, group_size: 128, alpha_search: true }
    }
}

/// One weight tensor with its (optional) name-matched calibration activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: WeightTensor,
    pub calibration: Option<CalibrationSet>,
}

fn quant_cfg(cfg: &ProfileConfig, mode: Mode) -> QuantConfig {
    QuantConfig { bits: cfg.bits, group_size: cfg.group_size, mode }
}

fn profile_layer(layer: &Layer, modes: &[Mode], cfg: &ProfileConfig) -> Result<Vec<EvalRecord>> {
    let t = &layer.weights;
    let cal = layer.calibration.as_ref().filter(|c| !c.is_empty());
    let mut out = Vec::new();
    let Some(cal) = cal.filter(|_| cfg.alpha_search) else {
        for &mode in modes {
            let q = quantize_tensor_scaled(t, cal, &quant_cfg(cfg, mode), &vec![1.0; t.cols])?;
            out.push(EvalRecord::from_outcome(t, &q, cal, mode, Protocol::Direct, 0.0)?);
        }
        return Ok(out);
    };
    let stats = channel_stats(cal)?;
    let mut uniform_alpha = None;
    for &mode in modes {
        let res = alpha_search(t, cal, &stats, &quant_cfg(cfg, mode))?;
        if mode == Mode::Uniform {
            uniform_alpha = Some(res.alpha_star);
        }
        out.push(EvalRecord::from_outcome(t, &res.best, Some(cal), mode, Protocol::Searched, res.alpha_star)?);
    }
    let fixed = match uniform_alpha {
        Some(a) => a,
        None => alpha_search(t, cal, &stats, &quant_cfg(cfg, Mode::Uniform))?.alpha_star,
    };
    let scales = scales_for_alpha(&stats, fixed);
    for &mode in modes {
        let q = quantize_tensor_scaled(t, Some(cal), &quant_cfg(cfg, mode), &scales)?;
        out.push(EvalRecord::from_outcome(t, &q, Some(cal), mode, Protocol::FixedAlpha, fixed)?);
    }
    Ok(out)
}

/// Evaluates every layer under every mode.
///
/// With calibration and `alpha_search`, each layer yields one `searched` row per
/// mode followed by one `fixed-alpha` row per mode, where the shared alpha is
/// the uniform arm's alpha*. Without calibration the rows are `direct` and
/// flagged as weight-space fallbacks.
pub fn layer_error_profile(layers: &[Layer], modes: &[Mode], cfg: &ProfileConfig) -> Result<Vec<EvalRecord>> {
    QuantConfig { bits: cfg.bits, group_size: cfg.group_size, mode: Mode::Hybrid }.validate()?;
    let per_layer: Vec<Vec<EvalRecord>> =
        layers.par_iter().map(|l| profile_layer(l, modes, cfg)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for r in per_layer {
        rows.extend(r);
    }
    Ok(rows)
}

/// Tensor files in `dir` (`.dacqt`, `.safetensors`), sorted by path.
pub fn tensor_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("dacqt") | Some("safetensors"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every tensor in `model_dir` and pairs it with `<calib_dir>/<name>.dacqt` when present.
pub fn load_layers(model_dir: &Path, calib_dir: Option<&Path>) -> Result<Vec<Layer>> {
    let mut layers = Vec::new();
    for path in tensor_files(model_dir)? {
        for weights in load_any(&path)? {
            let calibration = match calib_dir.map(|d| d.join(format!("{}.dacqt", weights.name))) {
                Some(p) if p.is_file() => {
                    let c = load_calibration(&p)?;
                    c.check_matches(&weights)?;
                    Some(c)
                }
                _ => None,
            };
            layers.push(Layer { weights, calibration });
        }
    }
    Ok(layers)
}

pub fn layer_error_profile_dir(
    model_dir: &Path,
    calib_dir: Option<&Path>,
    modes: &[Mode],
    cfg: &ProfileConfig,
) -> Result<Vec<EvalRecord>> {
    layer_error_profile(&load_layers(model_dir, calib_dir)?, modes, cfg)
}

pub const CSV_HEADER: [&str; 10] = [
    "tensor_name",
    "mode",
    "protocol",
    "mse",
    "mae",
    "activation_error",
    "output_error",
    "alpha_star",
    "fallback",
    "gamma_histogram",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV with [`CSV_HEADER`] columns; the histogram is `;`-joined, empty metrics are blank.
pub fn write_csv<W: Write>(records: &[EvalRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    out.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        let hist: Vec<String> = r.gamma_histogram.iter().map(u64::to_string).collect();
        out.write_record([
            r.tensor_name.clone(),
            r.mode.label().to_string(),
            r.protocol.as_str().to_string(),
            r.mse.to_string(),
            r.mae.to_string(),
            opt(r.activation_error),
            opt(r.output_error),
            r.alpha_star.to_string(),
            r.fallback.to_string(),
            hist.join(";"),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(records: &[EvalRecord], w: W) -> Result<()> {
    serde_json::to_writer_pretty(w, records).map_err(|e| Error::Io(std::io::Error::other(e)))
}

// ---------------------------------------------------------------------------
// Small-case optimal-grid oracle
// ---------------------------------------------------------------------------

pub const ORACLE_MAX_POINTS: usize = 512;
pub const ORACLE_MAX_LEVELS: usize = 8;
pub const ORACLE_MAX_ITERS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleGrid {
    pub grid: QuantGrid,
    pub mse: f64,
    pub iterations: usize,
    /// False when a start hit the iteration cap; the best iterate is returned.
    pub converged: bool,
}

/// Weight MSE of `w` under nearest-level assignment by linear scan.
pub fn grid_mse(w: &[f64], levels: &[f64]) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    let se: f64 = w.iter().map(|&x| levels.iter().map(|&l| (x - l) * (x - l)).fold(f64::INFINITY, f64::min)).sum();
    se / w.len() as f64
}

fn lloyd(w: &[f64], init: Vec<f64>) -> (Vec<f64>, f64, usize, bool) {
    let mut levels = init;
    let mut best = (levels.clone(), grid_mse(w, &levels));
    let tol = 1e-12 * (best.0.last().unwrap() - best.0[0]).abs().max(1e-300);
    for it in 1..=ORACLE_MAX_ITERS {
        let mut sum = vec![0.0; levels.len()];
        let mut cnt = vec![0usize; levels.len()];
        for &x in w {
            let mut j = 0;
            for k in 1..levels.len() {
                if (x - levels[k]).abs() < (x - levels[j]).abs() {
                    j = k;
                }
            }
            sum[j] += x;
            cnt[j] += 1;
        }
        let mut next: Vec<f64> =
            levels.iter().enumerate().map(|(j, &l)| if cnt[j] > 0 { sum[j] / cnt[j] as f64 } else { l }).collect();
        next.sort_by(f64::total_cmp);
        let shift = next.iter().zip(&levels).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        levels = next;
        let mse = grid_mse(w, &levels);
        if mse < best.1 {
            best = (levels.clone(), mse);
        }
        if shift <= tol {
            return (best.0, best.1, it, true);
        }
    }
    (best.0, best.1, ORACLE_MAX_ITERS, false)
}

/// Lloyd-Max grid for a small sample, started from both the uniform and the
/// logistic grid of the sample; the lower-MSE result is returned.
pub fn bruteforce_grid_oracle(w: &[f64], j: usize) -> Result<OracleGrid> {
    if w.is_empty() || w.len() > ORACLE_MAX_POINTS {
        return Err(Error::invalid(format!("oracle needs 1..={ORACLE_MAX_POINTS} points, got {}", w.len())));
    }
    if !(2..=ORACLE_MAX_LEVELS).contains(&j) {
        return Err(Error::invalid(format!("oracle needs 2..={ORACLE_MAX_LEVELS} levels, got {j}")));
    }
    let stats = GroupStats::from_values(w)?;
    let mut best: Option<OracleGrid> = None;
    let mut all_converged = true;
    for kind in [GridKind::Uniform, GridKind::Logistic] {
        let start = grid_for(&stats, j, kind, if kind == GridKind::Uniform { 1.0 } else { 0.0 })?;
        let (levels, mse, iterations, converged) = lloyd(w, start.levels);
        all_converged &= converged;
        if best.as_ref().is_none_or(|b| mse < b.mse) {
            let grid = QuantGrid { levels, kind, gamma: start.gamma, degenerate: stats.is_degenerate() };
            best = Some(OracleGrid { grid, mse, iterations, converged });
        }
    }
    let mut best = best.expect("two starts");
    best.converged = all_converged;
    Ok(best)
}
