//! `cimn`: generate synthetic data, build splits, train, evaluate and sweep.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "cimn",
    version,
    about = "Camera-invariant meta-learning for single-camera re-identification"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data, split and training (sweeps start their seed list here).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Root for relative output directories.
    #[arg(long, global = true, env = config::OUT_ROOT_ENV)]
    pub out_root: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train and test manifests for the configured generator.
    Generate,
    /// Build a single-camera (sct) or size-matched random (cg) split.
    Split {
        /// Training manifest to split.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Target size of a cg split (default: the sct size).
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a model; without --manifest the data is generated from the config.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Split file selecting samples of the manifest.
        #[arg(long, requires = "manifest")]
        split: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Continue from a checkpoint of an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; without --manifest the test set is generated from the config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run an experiment grid over several seeds.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
        /// Weight varied by the hyperparam sweep.
        #[arg(long, value_enum)]
        param: Option<ParamArg>,
    },
    /// Check every loss gradient and the meta-gradient against finite differences.
    Gradcheck,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Mode {
    Sct,
    Cg,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum MethodArg {
    Cimn,
    Triplet,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    /// CIMN against the triplet baseline on the single-camera split.
    Comparison,
    /// Both methods over the cross-camera fraction.
    Stability,
    /// Objective terms added one at a time.
    Ablation,
    /// One loss weight over a grid.
    Hyperparam,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum ParamArg {
    Lambda,
    Gamma1,
    Gamma2,
    Gamma3,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let common = cli.common;
    let result = match cli.command {
        Command::Generate => commands::generate(&common),
        Command::Split {
            manifest,
            mode,
            size,
        } => commands::split(&common, &manifest, mode, size),
        Command::Train {
            manifest,
            split,
            method,
            resume,
        } => commands::train(
            &common,
            manifest.as_deref(),
            split.as_deref(),
            method,
            resume.as_deref(),
        ),
        Command::Eval {
            checkpoint,
            manifest,
        } => commands::eval(&common, &checkpoint, manifest.as_deref()),
        Command::Sweep { kind, param } => commands::sweep(&common, kind, param),
        Command::Gradcheck => commands::gradcheck(&common),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
