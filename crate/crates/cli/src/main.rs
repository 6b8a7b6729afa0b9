//! `msmm`: fit spatial mixture models to survey tabulations from the command
//! line.
//!
//! Exit status is 0 on success, 2 for configuration errors, 3 for data errors
//! and 4 for numerical failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod failure;

use config::{ModelKind, Overrides, RunConfig};
use failure::Failure;

#[derive(Parser)]
#[command(name = "msmm", version, about = "Spatial mixed effects models and their Dirichlet-process mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write predictions, diagnostics and a manifest.
    Fit(RunArgs),
    /// Build the Moran basis and write the cache and a report.
    Basis(RunArgs),
    /// Run a perturbation study against a known truth.
    Simulate(RunArgs),
    /// Recompute diagnostics from a draw dump.
    Diagnose {
        /// `chain,iteration,parameter,value` CSV written by `fit` with `keep_draws`.
        dump: PathBuf,
        /// Directory for `diagnostics.json`; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    chains: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelKind>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    match s {
        "msm" => Ok(ModelKind::Msm),
        "msmm" => Ok(ModelKind::Msmm),
        "fh" => Ok(ModelKind::Fh),
        _ => Err(format!("unknown model `{s}` (expected msm, msmm or fh)")),
    }
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, Failure> {
        let overrides = Overrides {
            seed: self.seed,
            chains: self.chains,
            out: self.out.clone(),
            model: self.model,
            iterations: self.iterations,
            burn_in: self.burn_in,
            replicates: self.replicates,
        };
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Fit(args) => commands::fit(&args.load()?),
        Command::Basis(args) => commands::basis(&args.load()?),
        Command::Simulate(args) => commands::simulate(&args.load()?),
        Command::Diagnose { dump, out } => commands::diagnose(&dump, out.as_ref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
