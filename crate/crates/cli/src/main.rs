use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod svg;

use config::ConfigError;

/// Intention-aware diffusion trajectory prediction: data, training, sampling, metrics.
#[derive(Parser, Debug)]
#[command(name = "idm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Configuration file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Random seed (overrides the config file and IDM_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scenario dataset with mode sidecars.
    Synth(commands::SynthArgs),
    /// Train an IDM or baseline model.
    Train(commands::TrainArgs),
    /// Sample trajectories for every window of a dataset.
    Predict(commands::PredictArgs),
    /// Score a predictions file against ground truth.
    Eval(commands::EvalArgs),
    /// Compare IDM and baseline checkpoints on calls, time and accuracy.
    Bench(commands::BenchArgs),
    /// Render predictions or a density grid as SVG.
    Plot(commands::PlotArgs),
    /// Train and evaluate over a grid of goal and trajectory step counts.
    Sweep(commands::SweepArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<idm_core::Error>() {
        Some(idm_core::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Plot(a) => commands::plot(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
