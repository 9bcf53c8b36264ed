//! `fikan`: run experiment presets and single fits, generate datasets,
//! dump basis functions and verify library invariants.
//!
//! Exit codes: 0 success, 2 a check failed, 64 usage error, 74 I/O error,
//! 70 any other failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use fikan::bench::PresetName;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Failed(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 64,
            CliError::Io(_) => 74,
            CliError::Failed(_) => 2,
            CliError::Internal(_) => 70,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Failed(m) => write!(f, "check failed: {m}"),
            CliError::Internal(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<fikan::Error> for CliError {
    fn from(e: fikan::Error) -> Self {
        use fikan::Error as E;
        match e {
            E::Io(_) | E::Csv(_) => CliError::Io(e.to_string()),
            E::InvalidArgument(_) | E::Domain(_) => CliError::Usage(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<fikan::diffengine::EngineError> for CliError {
    fn from(e: fikan::diffengine::EngineError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "fikan", version, about = "Fractal interpolation KAN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a named experiment preset across seeds and write aggregated results.
    Preset(PresetArgs),
    /// Train one model on one target.
    Fit(FitArgs),
    /// Write fractal interpolation basis values on a dense grid as CSV.
    Bases(BasesArgs),
    /// Write the train/test split of a target.
    Gen(GenArgs),
    /// Run the invariant suite and print a pass/fail table.
    Verify,
}

#[derive(Args, Debug)]
pub struct PresetArgs {
    /// One of: 1d, holder-sweep, param-matched, scaling, noise, continual,
    /// reg-sweep, depth, 2d, pde, diagnostic.
    pub name: Option<PresetName>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Worker threads (default: available cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Override the preset's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Keep only these target labels.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
    /// Keep only these model labels.
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<String>>,
    /// Keep only these setting labels (e.g. `G=8`, `lambda=1`).
    #[arg(long, value_delimiter = ',')]
    pub settings: Option<Vec<String>>,
    /// Output directory (default: `$FIKAN_RESULTS_DIR/<preset>/<timestamp>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat JSON file of defaults; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// mlp, kan, pure or hybrid.
    #[arg(long)]
    pub model: Option<String>,
    /// Target family, e.g. `sawtooth`, `holder:0.5`, `diffusion:0.3`.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub grid: Option<usize>,
    /// Fractal recursion depth (Pure and Hybrid only).
    #[arg(long)]
    pub depth: Option<usize>,
    /// Hidden width of the spline and fractal networks.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_frac: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Add Gaussian noise to the training targets at this SNR.
    #[arg(long)]
    pub noise_snr_db: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BasesArgs {
    /// One contraction for every interval, or a comma-separated list of N.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub d: Option<Vec<f64>>,
    /// Number of intervals N.
    #[arg(long)]
    pub grid_n: Option<usize>,
    /// Recursion depth (default: enough for a 1e-6 truncation error).
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise_snr_db: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            eprint!("{msg}");
            if !msg.contains("Usage:") {
                let mut cmd = Cli::command();
                cmd.build();
                let sub = std::env::args().nth(1).unwrap_or_default();
                let usage = match cmd.find_subcommand_mut(&sub) {
                    Some(s) => s.render_usage(),
                    None => cmd.render_usage(),
                };
                eprintln!("\n{usage}");
            }
            return ExitCode::from(64);
        }
    };
    let outcome = match cli.command {
        Command::Preset(a) => commands::preset(a),
        Command::Fit(a) => commands::fit(a),
        Command::Bases(a) => commands::bases(a),
        Command::Gen(a) => commands::gen(a),
        Command::Verify => commands::verify(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
