//! Scenario-driven entry point: configuration parsing, pipeline dispatch,
//! seed management, and output artifacts.

pub mod runner;
pub mod scenario;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "shocklaw",
    about = "Shock-particle simulator and kinetic solver for scalar conservation laws with Markovian data",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Scenario configuration file (TOML).
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,

    /// Override the scenario seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker count for ensemble parallelism (results are independent of
    /// this value).
    #[arg(long, default_value_t = 0, global = true)]
    pub workers: usize,

    /// Override the scenario output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Scale all grid resolutions by this factor.
    #[arg(long, default_value_t = 1.0, global = true)]
    pub resolution_scale: f64,
}

#[derive(Subcommand, Debug, Clone, Copy)]
pub enum Command {
    /// Ensemble of particle simulations with summary statistics.
    Simulate,
    /// Solve the drift, kernel, and marginal equations; export fields.
    Kinetic,
    /// Two-pipeline statistical comparison plus identity suites.
    Validate,
    /// Conditioned-kernel pipeline (fundamental class).
    Htransform,
    /// Godunov reference run against one seeded realization.
    Oracle,
}

/// Exit codes: 0 success, 1 verdict or runtime failure, 2 configuration
/// error.
pub fn execute(cli: &Cli) -> i32 {
    let path = match &cli.scenario {
        Some(p) => p.clone(),
        None => {
            eprintln!("error: --scenario <path> is required");
            return 2;
        }
    };
    let mut scn = match scenario::load(&path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if let Some(seed) = cli.seed {
        scn.seed = seed;
    }
    scn.apply_resolution_scale(cli.resolution_scale);
    let out = runner::resolve_out_dir(&scn, cli.out.as_deref());
    let workers = if cli.workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cli.workers
    };
    let run = || match cli.command {
        Command::Simulate => runner::simulate(&scn, &out),
        Command::Kinetic => runner::kinetic(&scn, &out),
        Command::Validate => runner::validate(&scn, &out),
        Command::Htransform => runner::htransform(&scn, &out),
        Command::Oracle => runner::oracle(&scn, &out),
    };
    match runner::with_pool(workers, run) {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("verdict failure; see the report in {}", out.display());
            1
        }
        Err(runner::RunError::Config(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
