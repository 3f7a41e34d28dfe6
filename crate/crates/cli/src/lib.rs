//! Command-line driver: prepare, synth, train, detect, evaluate.

pub mod bundle;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hgad_core::Error;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parameter(_) => EXIT_CONFIG,
        Error::Divergence { .. } | Error::NonFinite { .. } => EXIT_DIVERGENCE,
        _ => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(name = "hgad", version, about = "Hypergraph forecasting anomaly detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// RunConfig JSON; flags take precedence over its values.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output location; replaces an existing one only with --force.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean, split and normalize a CSV into a bundle directory.
    Prepare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        label_column: Option<String>,
        #[arg(long)]
        require_labels: bool,
        #[arg(long)]
        timestamp_column: Option<String>,
    },
    /// Write a labelled synthetic CSV.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Train a forecaster on a bundle's training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// full, no_hyper, no_tcn, no_gcn or no_mtcl
        #[arg(long)]
        ablation: Option<String>,
        /// mtcl or gsl
        #[arg(long)]
        structure: Option<String>,
    },
    /// Fit a detector on validation errors and score the test split.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// pca or gmm
        #[arg(long)]
        detector: Option<String>,
        /// max or q<fraction>
        #[arg(long)]
        threshold: Option<String>,
        #[arg(long)]
        sliding_window: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Score a report against the bundle labels.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        point_adjust: bool,
    },
}

/// Runs one command; the error carries the exit code via [`exit_code`].
pub fn run(cli: Cli) -> hgad_core::Result<()> {
    commands::dispatch(cli.command)
}
