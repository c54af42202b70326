//! Batch CLI: simulate datasets, fit models, summarize draws.
//!
//! Exit codes: 0 success, 2 validation or identification failure, 3 I/O,
//! 4 numerical divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mdam_core::config::RunConfig;
use mdam_core::runner::{cmd_fit, cmd_simulate, cmd_summarize, FitOverrides};

#[derive(Parser)]
#[command(name = "mdam", version, about = "Nonresponse modeling with auxiliary margins")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's [output].dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset, its truth fixture and true-estimand sidecar.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the configured model: draws, acceptance rates, identification
    /// report, completed dataset, manifest.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Number of chains (default from config).
        #[arg(long)]
        chains: Option<usize>,
        /// Override iteration count.
        #[arg(long)]
        iterations: Option<usize>,
        /// Override burn-in.
        #[arg(long)]
        burnin: Option<usize>,
        /// Fit even if the identification check says overparameterized.
        #[arg(long)]
        force: bool,
    },
    /// Summarize one or more fit directories into estimand and check tables.
    Summarize {
        #[command(flatten)]
        common: Common,
        /// Fit output directory (repeatable for side-by-side tables).
        #[arg(long, required = true)]
        draws: Vec<PathBuf>,
    },
}

fn out_dir(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<PathBuf, mdam_core::Error> {
    match flag {
        Some(p) => Ok(p.clone()),
        None => cfg
            .output
            .as_ref()
            .map(|o| cfg.resolve(&o.dir))
            .ok_or_else(|| mdam_core::Error::config("no --out flag and no [output].dir in config")),
    }
}

fn run() -> Result<(), mdam_core::Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { common } => {
            let cfg = RunConfig::from_path(&common.config)?;
            let out = out_dir(&cfg, &common.out)?;
            let seed = common.seed.unwrap_or(cfg.chain.seed);
            cmd_simulate(&cfg, Some(&common.config), &out, seed)
        }
        Command::Fit {
            common,
            chains,
            iterations,
            burnin,
            force,
        } => {
            let cfg = RunConfig::from_path(&common.config)?;
            let out = out_dir(&cfg, &common.out)?;
            let overrides = FitOverrides {
                seed: common.seed,
                chains,
                iterations,
                burn_in: burnin,
                force,
            };
            cmd_fit(&cfg, Some(&common.config), &out, &overrides).map(|_| ())
        }
        Command::Summarize { common, draws } => {
            let cfg = RunConfig::from_path(&common.config)?;
            let out = out_dir(&cfg, &common.out)?;
            cmd_summarize(&cfg, Some(&common.config), &draws, &out)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
