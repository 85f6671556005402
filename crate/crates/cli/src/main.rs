//! Batch experiment runner for deep GP width/depth studies.
//!
//! Every subcommand is deterministic under a fixed master seed and writes CSV
//! data files alongside JSON sidecars carrying the resolved configuration.

use deepgp_cli::{cmds, config};

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deepgp_core::Error;

#[derive(Parser)]
#[command(
    name = "deepgp",
    version,
    about = "Deep Gaussian process width/depth experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON experiment configuration; defaults are used when absent.
    #[arg(long, env = "DEEPGP_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, env = "DEEPGP_SEED")]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, env = "DEEPGP_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// N=2 marginal density grids across the width/depth presets.
    DensityGrid(CommonArgs),
    /// 2-layer deep GP metrics as a function of width vs the limiting GP.
    WidthSweep(CommonArgs),
    /// Moment-matched depth comparison (1, 2, 3 layers).
    DepthCompare(CommonArgs),
    /// Concentration, characteristic-function, and width-invariance checks.
    ConvergenceCheck(CommonArgs),
    /// Generate-from-width-j / fit-width-k control experiment.
    Control(CommonArgs),
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::CholeskyFailed { .. } | Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match &cli.command {
        Command::DensityGrid(args) => {
            let mut cfg: config::DensityGridConfig = config::load_config(args.config.as_deref())?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(out) = &args.out {
                cfg.out = out.clone();
            }
            cmds::density_grid::run(&cfg)
        }
        Command::WidthSweep(args) => {
            let mut cfg: config::WidthSweepConfig = config::load_config(args.config.as_deref())?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(out) = &args.out {
                cfg.out = out.clone();
            }
            cmds::width_sweep::run(&cfg)
        }
        Command::DepthCompare(args) => {
            let mut cfg: config::DepthCompareConfig = config::load_config(args.config.as_deref())?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(out) = &args.out {
                cfg.out = out.clone();
            }
            cmds::depth_compare::run(&cfg)
        }
        Command::ConvergenceCheck(args) => {
            let mut cfg: config::ConvergenceConfig = config::load_config(args.config.as_deref())?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(out) = &args.out {
                cfg.out = out.clone();
            }
            cmds::convergence::run(&cfg)
        }
        Command::Control(args) => {
            let mut cfg: config::ControlConfig = config::load_config(args.config.as_deref())?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(out) = &args.out {
                cfg.out = out.clone();
            }
            cmds::control::run(&cfg)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
