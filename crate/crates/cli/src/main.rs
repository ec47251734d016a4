//! `uniuir`: dataset checks, depth extraction, two-stage training,
//! restoration and evaluation.
//!
//! Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.

mod commands;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const CONFIG_ENV: &str = "UNIUIR_CONFIG";

#[derive(Parser, Debug)]
#[command(name = "uniuir", version, about = "Underwater image restoration")]
pub struct Cli {
    /// Run configuration (`key = value` lines); falls back to $UNIUIR_CONFIG,
    /// then to the built-in paper profile.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,

    /// Config override, repeatable (`--set iters_stage1=20`).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProviderKind {
    Stub,
    External,
}

#[derive(Args, Debug, Clone)]
pub struct DepthArgs {
    #[arg(long = "depth-provider", value_enum, default_value_t = ProviderKind::Stub)]
    pub provider: ProviderKind,
    /// Called as `<cmd> <in.png> <out.png>`; required for the external provider.
    #[arg(long = "depth-cmd")]
    pub command: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check a dataset root holding `input/` and `gt/`.
    Validate { root: PathBuf },
    /// Write a 16-bit depth PNG for every image of a folder.
    Depth {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        depth: DepthArgs,
        /// Content-hash cache folder reused across runs.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Write an untrained checkpoint of the configured model.
    Init {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Dataset root (`input/`, `gt/`).
        #[arg(long)]
        data: PathBuf,
        /// Output folder for checkpoints and the loss log.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from (a stage I checkpoint starts stage 2).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total iterations of the stage (overrides the config).
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: u64,
        /// Append a wall-clock column to the log (breaks bit-identical logs).
        #[arg(long)]
        wall_time: bool,
        #[command(flatten)]
        depth: DepthArgs,
    },
    /// Restore every PNG of a folder.
    Restore {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        depth: DepthArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write per-layer expert selection counts here.
        #[arg(long)]
        expert_hist: Option<PathBuf>,
        /// Depth cache folder for the external provider.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Score restored images.
    Evaluate {
        #[arg(long)]
        restored: PathBuf,
        #[arg(long, required_unless_present = "no_ref", conflicts_with = "no_ref")]
        gt: Option<PathBuf>,
        /// Only the no-reference metrics.
        #[arg(long)]
        no_ref: bool,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stand-in external depth tool: `depth-stub <in.png> <out.png>`.
    #[command(hide = true)]
    DepthStub { input: PathBuf, output: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(uniuir::error::Error::Provider { diagnostics, .. }) = e.downcast_ref() {
                if !diagnostics.is_empty() {
                    eprintln!("{diagnostics}");
                }
            }
            ExitCode::FAILURE
        }
    }
}
