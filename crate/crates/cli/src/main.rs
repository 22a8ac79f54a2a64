//! Command-line front end: data generation, model fitting, prediction,
//! and diagnostics, driven by a TOML run configuration.
//!
//! Exit codes: 0 success, 2 configuration/data validation, 3 I/O,
//! 4 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hamst::Error;

#[derive(Parser)]
#[command(
    name = "hamst",
    version,
    about = "Hamiltonian-dynamics spatio-temporal modeling: simulate, fit, predict, diagnose"
)]
struct Cli {
    /// Path to the TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides the config and HAMST_OUTPUT_ROOT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Cap the worker-thread count; results are independent of it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (locations, y, x, manifest).
    Generate {
        #[arg(value_enum)]
        generator: Generator,
    },
    /// Fit the model by MCMC; writes chain CSV, latent snapshots, summary.
    Fit,
    /// Posterior prediction in time, and reconstruction at new sites.
    Predict,
    /// Empirical diagnostics.
    Diagnose {
        #[arg(value_enum)]
        kind: DiagnoseKind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Hamiltonian,
    Gp3,
    Gqn,
}

#[derive(Clone, Copy, ValueEnum)]
enum DiagnoseKind {
    CorrExperiment,
    LagCurve,
    Stationarity,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // best effort; a second initialization in tests is harmless
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let run = || -> hamst::Result<()> {
        let config_path = cli
            .config
            .as_ref()
            .ok_or_else(|| Error::Domain("--config is required".into()))?;
        let ctx = commands::Context::load(config_path, cli.out.clone())?;
        match &cli.command {
            Command::Generate { generator } => {
                let name = match generator {
                    Generator::Hamiltonian => "hamiltonian",
                    Generator::Gp3 => "gp3",
                    Generator::Gqn => "gqn",
                };
                commands::cmd_generate(&ctx, name)
            }
            Command::Fit => commands::cmd_fit(&ctx),
            Command::Predict => commands::cmd_predict(&ctx),
            Command::Diagnose { kind } => {
                let name = match kind {
                    DiagnoseKind::CorrExperiment => "corr-experiment",
                    DiagnoseKind::LagCurve => "lag-curve",
                    DiagnoseKind::Stationarity => "stationarity",
                };
                commands::cmd_diagnose(&ctx, name)
            }
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Domain(_) | Error::Usage(_) | Error::Parse { .. } => 2,
        Error::Io { .. } => 3,
        Error::Numerical(_) | Error::Simulation(_) | Error::Optimization(_) => 4,
        Error::Mcmc { source, .. } => exit_code(source),
    }
}
