//! `drma`: fit Bayesian hierarchical dose-response meta-analysis models,
//! predict absolute responses, check MCMC convergence, and run simulation
//! studies, from aggregated CSV data.
//!
//! Every command writes into a run directory (`--out`) containing exactly one
//! `manifest.json` with the resolved configuration, seed, and input
//! checksums; re-running the recorded command reproduces the outputs.
//! Exit codes: 0 on success, 1 on any validation/configuration/runtime
//! error, 2 on command-line usage errors.

mod commands;
mod manifest;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "drma", version, about = "Bayesian hierarchical dose-response meta-analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a dose-response model to a dataset
    Fit(commands::fit::FitArgs),
    /// Export relative/absolute dose-response curves from a completed fit
    Curve(commands::curve::CurveArgs),
    /// Run a simulation study over scenario grids
    Simulate(commands::simulate::SimulateArgs),
    /// Convergence diagnostics for a draws file
    Diagnose(commands::diagnose::DiagnoseArgs),
    /// Validate a dataset and report per-study usability
    Validate(commands::validate::ValidateArgs),
}

/// Flags shared by every subcommand.
#[derive(Args, Clone)]
pub struct CommonArgs {
    /// RNG seed; all outputs are deterministic given the seed
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Worker threads (0 = one per core); results do not depend on this
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Output directory (created if missing)
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(args) => dispatch(&args.common.clone(), move || commands::fit::run(args)),
        Command::Curve(args) => dispatch(&args.common.clone(), move || commands::curve::run(args)),
        Command::Simulate(args) => {
            dispatch(&args.common.clone(), move || commands::simulate::run(args))
        }
        Command::Diagnose(args) => {
            dispatch(&args.common.clone(), move || commands::diagnose::run(args))
        }
        Command::Validate(args) => commands::validate::run(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch<F: FnOnce() -> Result<()>>(common: &CommonArgs, f: F) -> Result<()> {
    if common.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(common.threads)
            .build_global()
            .ok();
    }
    std::fs::create_dir_all(&common.out)?;
    f()
}
