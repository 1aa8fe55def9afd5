//! `csir`: simulate CSI, run the estimator chain, and drive the studies.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Output directory override; `--out` still wins.
pub const OUT_DIR_ENV: &str = "CSIR_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "csir", version, about = "CSI-ratio sensing: simulation, estimation and studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides CSIR_OUT_DIR and the config).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesise a CSI tensor from the configured channel.
    Simulate(Common),
    /// Estimate Doppler, AoA and delay from a stored tensor.
    Estimate {
        /// Tensor container written by `simulate`.
        tensor: PathBuf,
        /// Static component (`static.json` from `simulate`) for absolute delays.
        #[arg(long = "static")]
        static_component: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// NMSE against SNR.
    Sweep(Common),
    /// Doppler, AoA and delay spectra of one multi-path channel.
    Spectrum(Common),
    /// Convergence grid of the Taylor expansion.
    Convergence(Common),
}

#[derive(Debug)]
pub enum CliError {
    /// Bad input, configuration, file format or dimensions: exit 1.
    Input(String),
    /// The estimator failed after writing partial output: exit 2.
    Estimator(String),
}

impl From<csir::Error> for CliError {
    fn from(e: csir::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let jobs = match &cli.command {
        Command::Simulate(c) | Command::Sweep(c) | Command::Spectrum(c) | Command::Convergence(c) => c.jobs,
        Command::Estimate { common, .. } => common.jobs,
    };
    if let Some(jobs) = jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Simulate(c) => commands::simulate(&c),
        Command::Estimate { tensor, static_component, common } => {
            commands::estimate(&tensor, static_component.as_deref(), &common)
        }
        Command::Sweep(c) => commands::sweep(&c),
        Command::Spectrum(c) => commands::spectrum(&c),
        Command::Convergence(c) => commands::convergence(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Estimator(msg)) => {
            eprintln!("estimator failed (partial output written): {msg}");
            ExitCode::from(2)
        }
    }
}
