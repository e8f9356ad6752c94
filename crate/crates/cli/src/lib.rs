//! `crpn`: data generation, training, proposal extraction, evaluation and gradient checks.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<crpn_core::Error> for CliError {
    fn from(e: crpn_core::Error) -> Self {
        match e {
            crpn_core::Error::Numerical(m) => CliError::Numerical(m),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "crpn",
    version,
    about = "Cascade region proposal network on synthetic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the dataset seed for gen-data and the training seed elsewhere
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; never changes results
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub stages: Option<usize>,
    /// Later stages sample features from the initial anchors
    #[arg(long)]
    pub no_align: bool,
    /// Sample discrimination scheme: af, ab or afab
    #[arg(long)]
    pub metric: Option<String>,
    /// Train on raw regression targets
    #[arg(long)]
    pub no_stats: bool,
    /// Smooth-L1 at every stage
    #[arg(long)]
    pub no_iou_loss: bool,
    #[arg(long)]
    pub nms_thr: Option<f64>,
    #[arg(long)]
    pub max_proposals: Option<usize>,
}

impl ModelArgs {
    pub fn overrides(&self, seed: Option<u64>) -> Overrides {
        Overrides {
            seed,
            stages: self.stages,
            no_align: self.no_align,
            metric: self.metric.clone(),
            no_stats: self.no_stats,
            no_iou_loss: self.no_iou_loss,
            nms_thr: self.nms_thr,
            max_proposals: self.max_proposals,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a checkpoint plus per-epoch metrics
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `out_dir` from the config, else `runs`
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs
        #[arg(long)]
        until_epoch: Option<usize>,
    },
    /// Write proposals as JSON lines
    Propose {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
    },
    /// Average-recall report for a proposal file
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV destination; printed to stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
        /// Proposal budgets
        #[arg(long, value_delimiter = ',', default_values_t = vec![10, 100])]
        k: Vec<usize>,
    },
    /// Compare every analytic gradient with finite differences
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, hide = true)]
        perturb: Option<String>,
    },
}

/// Run a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
