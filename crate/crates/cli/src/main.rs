//! `swan`: train, evaluate, calibrate, prune, export and compare switchable
//! activation networks from a TOML run config.
//!
//! Exit codes: 0 ok, 1 other failure, 2 configuration or data, 3 divergence,
//! 4 checkpoint, 5 every comparison cell failed.

mod commands;
mod fetch;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use swan_core::Error;

#[derive(Parser, Debug)]
#[command(name = "swan", version, about = "Switchable activation networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to `out_dir` from the config, then `runs/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// MNIST directory; falls back to `data.dir`, then SWAN_DATA_DIR.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Mode {
    Dense,
    Soft,
    Hard,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured model; writes metrics.csv, best.ckpt and final.ckpt.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/final.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "hard")]
        mode: Mode,
    },
    /// Recompute BN running statistics under hard gating.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Recalibrate, then cut closed units out into a compact model.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Gate threshold; defaults to `prune.tau`, then the gates' own.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Write a checkpoint's weights as JSON.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Dropout, channel pruning and SWAN at matched FLOPs budgets.
    Compare(Common),
    /// Download (with curl and gunzip) and verify the four MNIST files.
    Fetch {
        /// Target directory; defaults to SWAN_DATA_DIR, then data/mnist.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Only check the SHA-256 of files already present.
        #[arg(long)]
        verify_only: bool,
    },
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Idx(_) | Error::Io(_) => 2,
            Error::Divergence { .. } => 3,
            Error::Checkpoint(_) => 4,
            _ => 1,
        };
        Failure::new(code, e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => commands::train(&c),
        Command::Eval { common, checkpoint, mode } => commands::eval(&common, checkpoint, mode),
        Command::Calibrate { common, checkpoint } => commands::calibrate(&common, checkpoint),
        Command::Prune { common, checkpoint, tau } => commands::prune(&common, checkpoint, tau),
        Command::Export { common, checkpoint } => commands::export(&common, checkpoint),
        Command::Compare(c) => commands::compare(&c),
        Command::Fetch { data_dir, verify_only } => fetch::fetch(data_dir, verify_only),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
