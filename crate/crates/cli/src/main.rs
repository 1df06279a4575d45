//! `clewi` — experiment runner for a continual-learning laboratory:
//! rehearsal methods with optional post-task weight interpolation.

mod config;
mod output;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use runner::CliError;

#[derive(Parser)]
#[command(
    name = "clewi",
    version,
    about = "Continual-learning lab: rehearsal training with post-task weight interpolation"
)]
struct Cli {
    /// Experiment config file (`key = value` lines; see the README).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Suppress progress lines (artifacts are still written).
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the task stream for every seed; write metrics, checkpoints, summary.
    Run,
    /// One full run per interpolation strength in sweep.alphas.
    SweepAlpha,
    /// Sweep the final-task merge over plot.alphas, recording per-task accuracy.
    InterpPlot,
    /// One full run per width multiplier in sweep.widths.
    WidthSweep,
    /// Weight-versus-buffer memory accounting for the configured model.
    MemoryBudget {
        /// Use this parameter count instead of building the configured model.
        #[arg(long, value_name = "N")]
        params: Option<usize>,
        /// Image shape as CxHxW (e.g. 3x32x32).
        #[arg(long, value_name = "CxHxW")]
        image: Option<String>,
        /// Buffer size in images (defaults to buffer.capacity).
        #[arg(long, value_name = "N")]
        buffer: Option<usize>,
    },
    /// Evaluate a checkpoint on every task of the configured stream.
    Eval {
        /// Checkpoint file written by a previous run.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<Option<config::ExperimentConfig>, CliError> {
    let Some(path) = &cli.config else {
        return Ok(None);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {}", path.display(), e)))?;
    let mut cfg = config::parse_config(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(Some(cfg))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    let need = || {
        cfg.as_ref()
            .ok_or_else(|| CliError::Config("--config is required for this command".into()))
    };
    match &cli.command {
        Command::Run => runner::cmd_run(need()?, cli.quiet),
        Command::SweepAlpha => runner::cmd_sweep_alpha(need()?, cli.quiet),
        Command::InterpPlot => runner::cmd_interp_plot(need()?, cli.quiet),
        Command::WidthSweep => runner::cmd_width_sweep(need()?, cli.quiet),
        Command::MemoryBudget {
            params,
            image,
            buffer,
        } => {
            let report =
                runner::cmd_memory_budget(cfg.as_ref(), *params, image.as_deref(), *buffer)?;
            print!("{}", report);
            Ok(())
        }
        Command::Eval { checkpoint } => runner::cmd_eval(need()?, checkpoint, cli.quiet),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code() as u8)
        }
    }
}
