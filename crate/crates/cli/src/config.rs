//! Run configuration: command-line flags layered over an optional TOML file.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use dacq_core::distfit::{DEFAULT_PROBES, DEFAULT_SAMPLE};
use dacq_core::quantizer::{Mode, QuantConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Flags shared by every pipeline command. All optional so that a config file
/// can fill the gaps; flags given on the command line win.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML file with any of the keys below (`bits`, `group_size`, `mode`, ...).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bits: Option<u8>,
    #[arg(long)]
    pub group_size: Option<usize>,
    /// uniform | logistic | hybrid
    #[arg(long)]
    pub mode: Option<String>,
    /// Search per-channel activation scales (`--alpha-search` or `--alpha-search=false`).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub alpha_search: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sample_n: Option<usize>,
    #[arg(long)]
    pub probe_m: Option<usize>,
    /// Directory of input tensors (.dacqt / .safetensors).
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Directory of name-matched calibration activations (.dacqt).
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

/// Keys accepted in a config file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub bits: Option<u8>,
    pub group_size: Option<usize>,
    pub mode: Option<String>,
    pub alpha_search: Option<bool>,
    pub seed: Option<u64>,
    pub sample_n: Option<usize>,
    pub probe_m: Option<usize>,
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub bits: u8,
    pub group_size: usize,
    pub mode: Mode,
    pub alpha_search: bool,
    pub seed: u64,
    pub sample_n: usize,
    pub probe_m: usize,
    pub input: PathBuf,
    pub calib: Option<PathBuf>,
    pub out: PathBuf,
    pub format: Format,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            group_size: 128,
            mode: Mode::Hybrid,
            alpha_search: false,
            seed: 0,
            sample_n: DEFAULT_SAMPLE,
            probe_m: DEFAULT_PROBES,
            input: PathBuf::from("."),
            calib: None,
            out: PathBuf::from("out"),
            format: Format::Csv,
        }
    }
}

impl RunConfig {
    pub fn quant(&self) -> QuantConfig {
        QuantConfig { bits: self.bits, group_size: self.group_size, mode: self.mode }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.quant().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.sample_n < 2 {
            return Err(CliError::Config(format!("sample_n must be at least 2, got {}", self.sample_n)));
        }
        if self.probe_m < 2 {
            return Err(CliError::Config(format!("probe_m must be at least 2, got {}", self.probe_m)));
        }
        Ok(())
    }
}

pub fn read_file_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

fn parse_mode(s: &str) -> Result<Mode, CliError> {
    s.parse().map_err(|e: dacq_core::Error| CliError::Config(e.to_string()))
}

impl RunArgs {
    /// Defaults, then the config file, then explicit flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let file = match &self.config {
            Some(p) => read_file_config(p)?,
            None => FileConfig::default(),
        };
        let d = RunConfig::default();
        let mode = match self.mode.as_deref().or(file.mode.as_deref()) {
            Some(m) => parse_mode(m)?,
            None => d.mode,
        };
        let cfg = RunConfig {
            bits: self.bits.or(file.bits).unwrap_or(d.bits),
            group_size: self.group_size.or(file.group_size).unwrap_or(d.group_size),
            mode,
            alpha_search: self.alpha_search.or(file.alpha_search).unwrap_or(d.alpha_search),
            seed: self.seed.or(file.seed).unwrap_or(d.seed),
            sample_n: self.sample_n.or(file.sample_n).unwrap_or(d.sample_n),
            probe_m: self.probe_m.or(file.probe_m).unwrap_or(d.probe_m),
            input: self.input.clone().or(file.input).unwrap_or(d.input),
            calib: self.calib.clone().or(file.calib),
            out: self.out.clone().or(file.out).unwrap_or(d.out),
            format: self.format.or(file.format).unwrap_or(d.format),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
