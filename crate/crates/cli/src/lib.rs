//! Batch pipeline behind the `mesh-unet` binary. Commands exchange data only
//! through files in the output directory.

// Negated comparisons are used so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use clap::Parser;

pub use commands::{run, Command};
pub use config::RunConfig;

pub const TOOL_VERSION: &str = concat!("mesh-unet ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] mesh_unet::Error),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Invalid settings reported by the library are config errors.
    pub fn from_config(e: mesh_unet::Error) -> Self {
        CliError::Config(e.to_string())
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for bad configs and inputs, 3 for numerical failures, 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        use mesh_unet::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::Numerical(_)) => 3,
            CliError::Core(E::Io { .. }) | CliError::Io { .. } => 1,
            CliError::Core(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mesh-unet", version, about = "Graph U-net post-processing of EIT reconstructions")]
pub struct Args {
    pub command: Command,
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-sample work (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Loads the config, applies the command-line overrides and runs the command.
pub fn execute(args: Args) -> Result<(), CliError> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = args.out {
        config.out = Some(out);
    }
    let out = config
        .out
        .clone()
        .ok_or_else(|| CliError::Config("no output directory (set `out` or pass --out)".into()))?;
    match args.workers {
        Some(0) => Err(CliError::Config("--workers must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?
            .install(|| run(args.command, &config, &out)),
        None => run(args.command, &config, &out),
    }
}
