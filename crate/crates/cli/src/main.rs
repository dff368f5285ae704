//! `specseg`: generate datasets, train and evaluate segmentation models,
//! run detection on IQ captures, and summarize experiment runs.
//!
//! Machine-readable output goes to stdout in the `--format` of choice;
//! progress and human summaries go to stderr. Exit codes: 0 ok, 2 config
//! error, 3 I/O error, 4 data-format error, 1 anything else.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "specseg", version, about = "Wideband spectrum segmentation with complex-valued networks")]
pub struct Cli {
    /// Format of the machine-readable output on stdout.
    #[arg(long, value_enum, default_value = "json", global = true)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a labeled IQ dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a dataset's train/val splits and score it on test.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-SNR metrics of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
    },
    /// Segment a raw capture of little-endian f32 I/Q pairs.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        iq: PathBuf,
        #[arg(long, default_value_t = 20e6)]
        sample_rate: f64,
        #[arg(long, default_value_t = 0.0)]
        center_freq: f64,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
    },
    /// Per-SNR metrics of the energy-detection baseline.
    Lad {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Combine training runs into per-SNR tables, curves and a convergence comparison.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Directory for the CSV files; stdout only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) => 2,
                CliError::Data(_) => 4,
            };
        }
        if let Some(e) = cause.downcast_ref::<specseg::Error>() {
            use specseg::Error::*;
            return match e {
                ConfigInvalid(_) | TauOutOfRange(_) | UnsupportedModulation(_) | PlacementInfeasible(_) | ModeMismatch { .. } => 2,
                Io(_) => 3,
                FormatVersionMismatch(_) | CorruptBlob(_) | CorruptRecord { .. } | SplitMissing(_) | DatasetEmpty(_)
                | Json(_) | ShapeMismatch(_) | NonPowerOfTwoLength(_) | LengthNotDivisible { .. } => 4,
                SingularCovariance { .. } | BatchTooSmall(_) => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
