//! `ezdit` command-line harness: variant comparison, staged training,
//! sampling, the guidance sweep and caption filtering.
//!
//! Every command reads one [`ExperimentConfig`], writes its data files into
//! the configured output directory together with a resolved copy of the
//! config, and appends one [`RunManifest`] line to `runs.jsonl`.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod manifest;

pub use config::ExperimentConfig;
pub use manifest::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ezdit_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ezdit", version, about = "Toy-scale audio diffusion transformer experiments")]
pub struct Cli {
    /// Experiment config (JSON). Defaults to the built-in toy preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter and memory table of the four DiT variants.
    Variants {
        /// toy, dit-l or dit-xl.
        #[arg(long)]
        scale: Option<String>,
        /// Also train each variant briefly at toy scale and report its final loss.
        #[arg(long)]
        train_toy: bool,
    },
    /// Runs one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Validate the config and resume chain, then stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Generates latents from a trained checkpoint.
    Sample {
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale w.
        #[arg(long)]
        cfg: Option<f64>,
        /// Rescale factor phi.
        #[arg(long)]
        rescale: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated text token ids; omit for unconditional sampling.
        #[arg(long, value_delimiter = ',')]
        text: Option<Vec<usize>>,
    },
    /// Guidance-scale and rescale-factor sweep.
    SweepCfg,
    /// Splits a caption manifest at a similarity threshold.
    Filter {
        manifest: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// `mock` or `file:PATH` (JSON object of id -> score).
        #[arg(long)]
        scorer: Option<String>,
    },
}

/// Parses `args` (program name first) and runs the command, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let line: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::dispatch(cli, &line.join(" ")) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
