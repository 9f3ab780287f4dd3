//! `dacq` command-line pipeline.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for data errors.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    cmd_eval, cmd_fit, cmd_gen_calib, cmd_gen_weights, cmd_profile, cmd_qq_export, cmd_quantize, EvalReport,
    FitSummary, Manifest, ManifestEntry,
};
pub use config::{Format, RunArgs, RunConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<dacq_core::Error> for CliError {
    fn from(e: dacq_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "dacq", version, about = "Distribution-aware companding quantization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit Normal / Laplace / Logistic references to every tensor.
    Fit(RunArgs),
    /// Quantize every tensor; writes `<out>/<mode>/<name>.dacqq` and a manifest.
    Quantize(RunArgs),
    /// Compare stored artifacts of several modes against the originals.
    Eval(EvalArgs),
    /// Write Q-Q tables only.
    QqExport(RunArgs),
    /// Generate seeded Gaussian calibration activations for every tensor.
    GenCalib(GenCalibArgs),
    /// Generate seeded synthetic weight tensors.
    GenWeights(GenWeightsArgs),
    /// Per-layer error profile: every mode, searched and fixed alpha.
    Profile(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated modes to compare.
    #[arg(long, value_delimiter = ',', default_value = "uniform,logistic,hybrid")]
    pub modes: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct GenCalibArgs {
    /// Directory of tensors whose shapes the activations must match.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub tokens: usize,
    /// Comma-separated channel indices to amplify.
    #[arg(long, value_delimiter = ',')]
    pub salient: Vec<usize>,
    #[arg(long, default_value_t = 100.0)]
    pub factor: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct GenWeightsArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// normal | laplace | logistic | mixture
    #[arg(long, default_value = "logistic")]
    pub family: String,
    #[arg(long, default_value_t = 512)]
    pub rows: usize,
    #[arg(long, default_value_t = 512)]
    pub cols: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0.02)]
    pub scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tensor name prefix; defaults to the family name.
    #[arg(long)]
    pub prefix: Option<String>,
}

fn parse_modes(modes: &[String]) -> Result<Vec<dacq_core::quantizer::Mode>, CliError> {
    modes.iter().map(|m| m.trim().parse().map_err(|e: dacq_core::Error| CliError::Config(e.to_string()))).collect()
}

/// Runs one command, returning the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("dacq: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Fit(a) => {
            let s = cmd_fit(&a.resolve()?)?;
            println!(
                "fit {} tensors: normal={} laplace={} logistic={} errors={}",
                s.tensors,
                s.tally["normal"],
                s.tally["laplace"],
                s.tally["logistic"],
                s.errors.len()
            );
        }
        Command::QqExport(a) => {
            let n = cmd_qq_export(&a.resolve()?)?;
            println!("wrote {n} Q-Q tables");
        }
        Command::Quantize(a) => {
            let m = cmd_quantize(&a.resolve()?)?;
            println!("quantized {} tensors ({})", m.entries.len(), m.mode);
        }
        Command::Eval(a) => {
            let cfg = a.run.resolve()?;
            let report = cmd_eval(&cfg, &parse_modes(&a.modes)?)?;
            println!("wrote {} rows to {}", report.records.len(), report.path.display());
            if !report.missing.is_empty() {
                return Err(CliError::Data(format!("missing modes: {}", report.missing.join(", "))));
            }
        }
        Command::Profile(a) => {
            let cfg = a.run.resolve()?;
            let rows = cmd_profile(&cfg, &parse_modes(&a.modes)?)?;
            println!("wrote {} profile rows", rows.len());
        }
        Command::GenCalib(a) => {
            let n = cmd_gen_calib(&a)?;
            println!("wrote {n} calibration sets");
        }
        Command::GenWeights(a) => {
            let n = cmd_gen_weights(&a)?;
            println!("wrote {n} tensors");
        }
    }
    Ok(0)
}
