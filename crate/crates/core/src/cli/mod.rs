//! The `microfossil` command line.
//!
//! Every subcommand reads the same TOML run configuration, echoes the
//! resolved configuration and seed to stderr, and writes its artifacts
//! atomically under `--out`. Exit codes: 0 success, 1 validation error,
//! 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use commands::{FeatureCache, GroundTruthPlate};
pub use config::{BackboneConfig, HeadConfig, Layout, McConfig, PathsConfig, RunConfig, SplitConfig};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, arguments or missing prerequisites.
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    crate::backbone::BackboneError,
    crate::checkpoint::CheckpointError,
    crate::dataset::DatasetError,
    crate::imaging::ImagingError,
    crate::nn::NnError,
    crate::uncertainty::UncertaintyError,
    std::io::Error,
    serde_json::Error
);

#[derive(Debug, Parser)]
#[command(
    name = "microfossil",
    version,
    about = "Microfossil specimen extraction, classification and uncertainty analysis"
)]
pub struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic plate benchmark with ground truth.
    Synth,
    /// Detect specimens on plates and write one crop per specimen.
    Extract,
    /// Build a manifest of the crops and assign stratified splits.
    Split,
    /// Train the classification head on backbone features.
    Train,
    /// Train every head configuration of the grid and rank them.
    GridSearch,
    /// Jointly train the head and the last backbone blocks.
    Finetune,
    /// Accuracy and confusion matrix of a trained head.
    Evaluate,
    /// Monte Carlo dropout analysis with review flags.
    McDropout,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Synth => "synth",
            Self::Extract => "extract",
            Self::Split => "split",
            Self::Train => "train",
            Self::GridSearch => "grid-search",
            Self::Finetune => "finetune",
            Self::Evaluate => "evaluate",
            Self::McDropout => "mc-dropout",
        }
    }
}

/// Resolves the configuration and runs one command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Validation(
            "no command given; see --help or use --print-config".into(),
        ));
    };
    if cfg.threads > 0 {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    eprintln!("microfossil {} (seed {})", command.name(), cfg.seed);
    eprintln!("--- resolved configuration ---\n{}---", cfg.to_toml());
    let layout = Layout::new(&cli.out, &cfg.paths);
    match command {
        Command::Synth => commands::synth(&cfg, &layout),
        Command::Extract => commands::extract(&cfg, &layout),
        Command::Split => commands::split(&cfg, &layout),
        Command::Train => commands::train(&cfg, &layout),
        Command::GridSearch => commands::grid_search(&cfg, &layout),
        Command::Finetune => commands::finetune(&cfg, &layout),
        Command::Evaluate => commands::evaluate(&cfg, &layout),
        Command::McDropout => commands::mc_dropout(&cfg, &layout),
    }
}

/// Parses `args` and runs, returning the process exit code.
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
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
