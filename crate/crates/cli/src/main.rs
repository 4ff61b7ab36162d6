mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::EvalWhich;
use config::RunConfig;
use error::CliError;
use histaug_core::milbench::Strategy;

/// Latent-space augmentation toolkit: train a conditional embedding
/// generator, benchmark augmentation strategies on bag classification,
/// and evaluate fidelity, retrieval, and throughput.
#[derive(Parser)]
#[command(name = "histaug", version)]
struct Cli {
    /// Path to a key=value configuration file (defaults apply otherwise)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the root seed from the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory from the configuration
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the embedding generator and save its weights
    TrainGen,
    /// Train bag classifiers over all folds with one augmentation strategy
    TrainMil {
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        /// Fraction of each fold's training bags to use (0 < f <= 1)
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        /// Patch resolution override (32 or 64)
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Run an evaluation protocol and write its report
    Eval {
        #[arg(long, value_enum)]
        which: WhichArg,
    },
    /// Transformation-key retrieval report (alias for eval --which retrieval)
    Retrieve,
    /// Latent trajectory exports (alias for eval --which trajectories)
    Trajectories,
    /// Throughput and peak-memory scaling over ascending batch sizes
    Bench {
        /// Comma-separated strictly ascending batch sizes
        #[arg(long, value_delimiter = ',', default_value = "1000,2000,4000,8000")]
        batch_sizes: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Base,
    Noise,
    Inst,
    Wsi,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Strategy {
        match s {
            StrategyArg::Base => Strategy::Base,
            StrategyArg::Noise => Strategy::Noise,
            StrategyArg::Inst => Strategy::Inst,
            StrategyArg::Wsi => Strategy::Wsi,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WhichArg {
    Recon,
    Invariance,
    Retrieval,
    Trajectories,
    CrossRes,
}

impl From<WhichArg> for EvalWhich {
    fn from(w: WhichArg) -> EvalWhich {
        match w {
            WhichArg::Recon => EvalWhich::Recon,
            WhichArg::Invariance => EvalWhich::Invariance,
            WhichArg::Retrieval => EvalWhich::Retrieval,
            WhichArg::Trajectories => EvalWhich::Trajectories,
            WhichArg::CrossRes => EvalWhich::CrossRes,
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Dependency(format!("cannot read config {}: {e}", path.display()))
            })?;
            RunConfig::parse(&text).map_err(CliError::Usage)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::TrainGen => commands::train_gen(&cfg),
        Cmd::TrainMil { strategy, fraction, resolution } => {
            if !(*fraction > 0.0 && *fraction <= 1.0) {
                return Err(CliError::Usage(format!(
                    "fraction must lie in (0, 1], got {fraction}"
                )));
            }
            let resolution = resolution.unwrap_or(cfg.resolution);
            if resolution != 32 && resolution != 64 {
                return Err(CliError::Usage(format!(
                    "resolution must be 32 or 64, got {resolution}"
                )));
            }
            commands::train_mil(&cfg, (*strategy).into(), *fraction, resolution)
        }
        Cmd::Eval { which } => commands::eval(&cfg, (*which).into()),
        Cmd::Retrieve => commands::eval(&cfg, EvalWhich::Retrieval),
        Cmd::Trajectories => commands::eval(&cfg, EvalWhich::Trajectories),
        Cmd::Bench { batch_sizes } => commands::bench(&cfg, batch_sizes),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("histaug: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
