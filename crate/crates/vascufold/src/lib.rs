//! Command-line pipeline: phantom generation, SRUS simulation,
//! preprocessing, training, reconstruction, quantification, evaluation and
//! reporting, all driven by one JSON experiment config.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod pipeline;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::CliError;
use pipeline::Layout;

/// Environment variable that replaces the config seed.
pub const SEED_ENV: &str = "VASCUFOLD_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate synthetic vessel phantoms and their voxel ground truth.
    Phantom,
    /// Render clean and degraded SRUS slice stacks.
    Simulate,
    /// Denoise, optionally register, and normalize slice stacks.
    Preprocess,
    /// Train the reconstruction network.
    Train,
    /// Reconstruct held-out volumes with the model and the extrusion baseline.
    Reconstruct,
    /// Extract centerline graphs and vascular parameters.
    Quantify,
    /// Segmentation metrics, parameter errors and fold improvements.
    Evaluate,
    /// Render the evaluation as text.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Phantom => "phantom",
            Command::Simulate => "simulate",
            Command::Preprocess => "preprocess",
            Command::Train => "train",
            Command::Reconstruct => "reconstruct",
            Command::Quantify => "quantify",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
        }
    }

    pub const PIPELINE: [Command; 8] = [
        Command::Phantom,
        Command::Simulate,
        Command::Preprocess,
        Command::Train,
        Command::Reconstruct,
        Command::Quantify,
        Command::Evaluate,
        Command::Report,
    ];
}

#[derive(Debug, Parser)]
#[command(name = "vascufold", version, about = "Synthetic SRUS 3D microvascular reconstruction pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (JSON).
    #[arg(short = 'c', long = "config", global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(short = 'o', long = "output", global = true)]
    pub output: Option<PathBuf>,
    /// Global seed; overrides the config and the environment.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Config override as a dotted key, e.g. `training.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

/// Seed precedence: `--seed`, then the environment, then the config.
fn resolve_seed(flag: Option<u64>, env: Option<String>) -> Result<Option<u64>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match env {
        Some(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::User(format!("{SEED_ENV}=`{s}` is not an unsigned integer"))),
        None => Ok(None),
    }
}

pub fn resolve_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::User("missing required option -c <config.json>".into()))?;
    let seed = resolve_seed(cli.seed, std::env::var(SEED_ENV).ok())?;
    let cfg = ExperimentConfig::load(path, &cli.set, seed)?;
    let out = cli
        .output
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::User("no output directory: pass -o <dir> or set key `output_dir`".into()))?;
    Ok((cfg, out))
}

/// Runs one stage against `out`, writing the resolved-config echo first.
pub fn run_stage(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let l = Layout::new(out);
    // the echo omits the output directory: it is the directory holding it
    let echo = ExperimentConfig { output_dir: None, ..cfg.clone() };
    pipeline::write_json(&out.join("resolved").join(format!("{}.json", command.name())), &echo)?;
    log::info!("{} -> {}", command.name(), out.display());
    match command {
        Command::Phantom => pipeline::run_phantom(cfg, &l),
        Command::Simulate => pipeline::run_simulate(cfg, &l),
        Command::Preprocess => pipeline::run_preprocess(cfg, &l),
        Command::Train => pipeline::run_train(cfg, &l),
        Command::Reconstruct => pipeline::run_reconstruct(cfg, &l),
        Command::Quantify => pipeline::run_quantify(cfg, &l),
        Command::Evaluate => pipeline::run_evaluate(cfg, &l),
        Command::Report => {
            let text = pipeline::run_report(cfg, &l)?;
            print!("{text}");
            Ok(())
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let (cfg, out) = resolve_config(cli)?;
    run_stage(cli.command, &cfg, &out)
}

/// Process entry: parses arguments, runs and maps the outcome to an exit
/// code (0 success, 1 user error, 2 internal error).
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match std::panic::catch_unwind(|| run(&cli)) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(_) => {
            eprintln!("error: internal invariant violated (panic)");
            2
        }
    }
}
