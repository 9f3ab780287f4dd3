use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dacq_core::awq::{alpha_search, channel_stats};
use dacq_core::distfit::{fit_sample, qq_table, sample_weights, standardize, Family, FitReport};
use dacq_core::evalx::{
    layer_error_profile, load_layers, record_from_artifact, tensor_files, write_csv, write_json, EvalRecord, Layer,
    ProfileConfig, Protocol,
};
use dacq_core::quantizer::{quantize_tensor, Mode, Objective};
use dacq_core::tensorio::{load_any, load_calibration, load_quantized, save_calibration, save_quantized, save_tensor};
use dacq_core::{synth, CalibrationSet, WeightTensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Format, RunConfig};
use crate::{CliError, GenCalibArgs, GenWeightsArgs};

fn create_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| CliError::Data(format!("cannot create {}: {e}", p.display())))
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let f = File::create(path).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value).map_err(|e| CliError::Data(e.to_string()))
}

fn input_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("input directory {} is not readable", dir.display())));
    }
    Ok(tensor_files(dir)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileError {
    pub file: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub tensors: usize,
    /// Best-fit family counts.
    pub tally: BTreeMap<String, usize>,
    /// Mean and population std of each family's metrics across tensors.
    pub families: BTreeMap<String, FamilySummary>,
    /// `(tensor, best family)` in input order.
    pub best: Vec<(String, Family)>,
    pub errors: Vec<FileError>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

fn summarize(reports: &[FitReport], errors: Vec<FileError>) -> FitSummary {
    let mut tally: BTreeMap<String, usize> = Family::ALL.iter().map(|f| (f.as_str().to_string(), 0)).collect();
    for r in reports {
        *tally.get_mut(r.best_family.as_str()).unwrap() += 1;
    }
    let families = Family::ALL
        .iter()
        .map(|&f| {
            let rmse: Vec<f64> = reports.iter().map(|r| r.metrics_for(f).rmse).collect();
            let mae: Vec<f64> = reports.iter().map(|r| r.metrics_for(f).mae).collect();
            let (rmse_mean, rmse_std) = mean_std(&rmse);
            let (mae_mean, mae_std) = mean_std(&mae);
            (f.as_str().to_string(), FamilySummary { rmse_mean, rmse_std, mae_mean, mae_std })
        })
        .collect();
    FitSummary {
        tensors: reports.len(),
        tally,
        families,
        best: reports.iter().map(|r| (r.tensor_name.clone(), r.best_family)).collect(),
        errors,
    }
}

fn write_qq(path: &Path, t: &WeightTensor, cfg: &RunConfig) -> Result<FitReport, CliError> {
    let sample = sample_weights(t, cfg.sample_n, cfg.seed)?;
    let s = standardize(&sample)?;
    let report = fit_sample(&t.name, &s, cfg.probe_m)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(e.to_string()))?;
    for row in qq_table(&s, cfg.probe_m) {
        w.serialize(row).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(report)
}

type FileOutcome = (PathBuf, Result<Vec<FitReport>, CliError>);

fn fit_files(cfg: &RunConfig, with_reports: bool) -> Result<Vec<FileOutcome>, CliError> {
    let files = input_files(&cfg.input)?;
    create_dir(&cfg.out)?;
    Ok(files
        .into_par_iter()
        .map(|path| {
            let res = load_any(&path).map_err(CliError::from).and_then(|tensors| {
                tensors
                    .iter()
                    .map(|t| {
                        let report = write_qq(&cfg.out.join(format!("{}.qq.csv", t.name)), t, cfg)?;
                        if with_reports {
                            write_json_file(&cfg.out.join(format!("{}.fit.json", t.name)), &report)?;
                        }
                        Ok(report)
                    })
                    .collect()
            });
            (path, res)
        })
        .collect())
}

fn split(outcomes: Vec<FileOutcome>) -> (Vec<FitReport>, Vec<FileError>) {
    let mut reports = Vec::new();
    let mut errors = Vec::new();
    for (path, res) in outcomes {
        match res {
            Ok(r) => reports.extend(r),
            Err(e) => {
                eprintln!("warning: {}: {e}", path.display());
                errors.push(FileError { file: path.display().to_string(), error: e.to_string() });
            }
        }
    }
    (reports, errors)
}

/// Writes `<name>.fit.json` and `<name>.qq.csv` per tensor plus `summary.json`.
/// Unreadable files are recorded in the summary and skipped.
pub fn cmd_fit(cfg: &RunConfig) -> Result<FitSummary, CliError> {
    let (reports, errors) = split(fit_files(cfg, true)?);
    let summary = summarize(&reports, errors);
    write_json_file(&cfg.out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Writes `<name>.qq.csv` per tensor; returns the number written.
pub fn cmd_qq_export(cfg: &RunConfig) -> Result<usize, CliError> {
    let (reports, _) = split(fit_files(cfg, false)?);
    Ok(reports.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub tensor: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub alpha_star: f64,
    /// `(alpha, L(alpha))`; empty without alpha search.
    pub alpha_losses: Vec<(f64, f64)>,
    pub gamma_histogram: Vec<u64>,
    pub objective: Objective,
    pub mse: f64,
    pub mae: f64,
    pub activation_error: Option<f64>,
    pub output_error: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: Mode,
    pub bits: u8,
    pub group_size: usize,
    pub alpha_search: bool,
    pub entries: Vec<ManifestEntry>,
}

fn calibration_for(calib: Option<&Path>, t: &WeightTensor) -> Result<Option<CalibrationSet>, CliError> {
    let Some(dir) = calib else { return Ok(None) };
    let p = dir.join(format!("{}.dacqt", t.name));
    if !p.is_file() {
        return Ok(None);
    }
    let cal = load_calibration(&p)?;
    cal.check_matches(t)?;
    Ok(Some(cal))
}

fn quantize_one(cfg: &RunConfig, t: &WeightTensor, dir: &Path) -> Result<ManifestEntry, CliError> {
    let start = Instant::now();
    let cal = calibration_for(cfg.calib.as_deref(), t)?;
    if cfg.alpha_search && cal.is_none() {
        return Err(CliError::Data(format!("alpha search needs calibration activations for '{}'", t.name)));
    }
    if cfg.mode == Mode::Hybrid && cal.is_none() {
        eprintln!("warning: no calibration for '{}'; hybrid search falls back to weight MSE", t.name);
    }
    if cfg.group_size > t.cols {
        eprintln!(
            "warning: group size {} exceeds {} columns of '{}'; one group per row",
            cfg.group_size, t.cols, t.name
        );
    }
    let q = cfg.quant();
    let (outcome, alpha_star, alpha_losses) = match (&cal, cfg.alpha_search) {
        (Some(c), true) => {
            let res = alpha_search(t, c, &channel_stats(c)?, &q)?;
            (res.best, res.alpha_star, res.losses)
        }
        _ => (quantize_tensor(t, cal.as_ref(), &q)?, 0.0, Vec::new()),
    };
    let file = format!("{}.dacqq", t.name);
    save_quantized(&outcome.tensor, dir.join(&file))?;
    let protocol = if cfg.alpha_search { Protocol::Searched } else { Protocol::Direct };
    let rec = EvalRecord::from_outcome(t, &outcome, cal.as_ref(), cfg.mode, protocol, alpha_star)?;
    Ok(ManifestEntry {
        tensor: t.name.clone(),
        file,
        rows: t.rows,
        cols: t.cols,
        alpha_star,
        alpha_losses,
        gamma_histogram: rec.gamma_histogram,
        objective: outcome.objective,
        mse: rec.mse,
        mae: rec.mae,
        activation_error: rec.activation_error,
        output_error: rec.output_error,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Quantizes every input tensor into `<out>/<mode>/` and writes `manifest.json` there.
pub fn cmd_quantize(cfg: &RunConfig) -> Result<Manifest, CliError> {
    let files = input_files(&cfg.input)?;
    let dir = cfg.out.join(cfg.mode.as_str());
    create_dir(&dir)?;
    let mut tensors = Vec::new();
    for f in files {
        tensors.extend(load_any(&f)?);
    }
    let entries = tensors.par_iter().map(|t| quantize_one(cfg, t, &dir)).collect::<Result<Vec<_>, _>>()?;
    let manifest = Manifest {
        mode: cfg.mode,
        bits: cfg.bits,
        group_size: cfg.group_size,
        alpha_search: cfg.alpha_search,
        entries,
    };
    write_json_file(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    /// Requested modes with no artifact directory.
    pub missing: Vec<String>,
    pub path: PathBuf,
}

fn write_report(records: &[EvalRecord], out: &Path, stem: &str, format: Format) -> Result<PathBuf, CliError> {
    create_dir(out)?;
    let (path, res) = match format {
        Format::Csv => {
            let p = out.join(format!("{stem}.csv"));
            let f = File::create(&p)?;
            (p, write_csv(records, BufWriter::new(f)))
        }
        Format::Json => {
            let p = out.join(format!("{stem}.json"));
            let f = File::create(&p)?;
            (p, write_json(records, BufWriter::new(f)))
        }
    };
    res?;
    Ok(path)
}

fn read_manifest(dir: &Path) -> Option<Manifest> {
    let f = File::open(dir.join("manifest.json")).ok()?;
    serde_json::from_reader(std::io::BufReader::new(f)).ok()
}

/// Scores `<out>/<mode>/*.dacqq` against the originals in `--in`, writing
/// `<out>/eval.csv` (or `.json`). Absent modes are reported in `missing`.
pub fn cmd_eval(cfg: &RunConfig, modes: &[Mode]) -> Result<EvalReport, CliError> {
    let mut originals: HashMap<String, WeightTensor> = HashMap::new();
    for f in input_files(&cfg.input)? {
        for t in load_any(&f)? {
            originals.insert(t.name.clone(), t);
        }
    }
    let mut jobs = Vec::new();
    let mut missing = Vec::new();
    for &mode in modes {
        let dir = cfg.out.join(mode.as_str());
        if !dir.is_dir() {
            eprintln!("missing mode: {} (no {})", mode.label(), dir.display());
            missing.push(mode.label().to_string());
            continue;
        }
        let manifest = read_manifest(&dir);
        let mut artifacts: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("dacqq"))
            .collect();
        artifacts.sort();
        for path in artifacts {
            jobs.push((mode, path, manifest.clone()));
        }
    }
    let mut records = jobs
        .par_iter()
        .map(|(mode, path, manifest)| {
            let qt = load_quantized(path)?;
            let orig = originals
                .get(&qt.name)
                .ok_or_else(|| CliError::Data(format!("no original tensor for artifact {}", path.display())))?;
            let cal = calibration_for(cfg.calib.as_deref(), orig)?;
            let entry = manifest.as_ref().and_then(|m| m.entries.iter().find(|e| e.tensor == qt.name));
            let searched = manifest.as_ref().is_some_and(|m| m.alpha_search);
            let protocol = if searched { Protocol::Searched } else { Protocol::Direct };
            let alpha = entry.map_or(0.0, |e| e.alpha_star);
            Ok(record_from_artifact(orig, &qt, cal.as_ref(), *mode, protocol, alpha)?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    records.sort_by(|a, b| a.tensor_name.cmp(&b.tensor_name).then(a.mode.cmp(&b.mode)));
    let path = write_report(&records, &cfg.out, "eval", cfg.format)?;
    Ok(EvalReport { records, missing, path })
}

/// Searched-alpha and fixed-alpha comparison of every mode; writes `<out>/profile.csv` (or `.json`).
pub fn cmd_profile(cfg: &RunConfig, modes: &[Mode]) -> Result<Vec<EvalRecord>, CliError> {
    input_files(&cfg.input)?;
    let layers: Vec<Layer> = load_layers(&cfg.input, cfg.calib.as_deref())?;
    for l in layers.iter().filter(|l| l.calibration.is_none()) {
        eprintln!("warning: no calibration for '{}'; weight-space fallback", l.weights.name);
    }
    let pcfg = ProfileConfig { bits: cfg.bits, group_size: cfg.group_size, alpha_search: cfg.alpha_search };
    let rows = layer_error_profile(&layers, modes, &pcfg)?;
    write_report(&rows, &cfg.out, "profile", cfg.format)?;
    Ok(rows)
}

pub fn cmd_gen_calib(args: &GenCalibArgs) -> Result<usize, CliError> {
    create_dir(&args.out)?;
    let mut n = 0;
    for f in input_files(&args.input)? {
        for t in load_any(&f)? {
            let seed = args.seed.wrapping_add(n as u64);
            let cal = synth::gaussian_calibration(&t.name, args.tokens, t.cols, &args.salient, args.factor, seed)?;
            save_calibration(&cal, args.out.join(format!("{}.dacqt", t.name)))?;
            n += 1;
        }
    }
    Ok(n)
}

pub fn cmd_gen_weights(args: &GenWeightsArgs) -> Result<usize, CliError> {
    create_dir(&args.out)?;
    let prefix = args.prefix.clone().unwrap_or_else(|| args.family.clone());
    for i in 0..args.count {
        let name = format!("{prefix}_{i}");
        let seed = args.seed.wrapping_add(i as u64);
        let t = if args.family == "mixture" {
            synth::logistic_mixture_tensor(&name, args.rows, args.cols, args.scale, seed)?
        } else {
            let family: Family = args.family.parse().map_err(|e: dacq_core::Error| CliError::Config(e.to_string()))?;
            synth::family_tensor(&name, family, args.rows, args.cols, args.scale, seed)?
        };
        save_tensor(&t, args.out.join(format!("{name}.dacqt")))?;
    }
    Ok(args.count)
}
