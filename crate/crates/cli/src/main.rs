//! `skillworld`: world generation, training, evaluation, plotting and
//! multi-seed comparisons.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "skillworld", version, about = "Skill-gated RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a world snapshot.
    Genworld {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the world seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method, writing metrics, checkpoints and a manifest.
    Train(commands::TrainArgs),
    /// Evaluate a policy checkpoint on one split.
    Eval(commands::EvalArgs),
    /// Render a metrics CSV as an SVG chart.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full method against its two ablations over several seeds.
    Ablation(commands::SuiteArgs),
    /// Full method against the GRPO baselines over several seeds.
    Compare(commands::SuiteArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Genworld { config, seed, out } => {
            commands::genworld(config.as_deref(), seed, &out)
        }
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Plot { metrics, out } => commands::plot(&metrics, &out),
        Command::Ablation(args) => {
            commands::suite(&args, &skillworld::experiment::ABLATION_METHODS)
        }
        Command::Compare(args) => commands::suite(&args, &skillworld::experiment::BASELINE_METHODS),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
