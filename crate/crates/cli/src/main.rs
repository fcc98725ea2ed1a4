mod commands;
mod config;

use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::RunArgs;

/// Calibrate early-exit thresholds with risk-control guarantees.
#[derive(Debug, Parser)]
#[command(name = "eecal", version)]
struct Cli {
    /// Worker threads (default: all cores)
    #[arg(long, global = true, env = "EECAL_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a trace file and print per-check diagnostics
    Validate(RunArgs),
    /// Write synthetic traces from a generator config
    Generate(RunArgs),
    /// Pick a threshold on calibration traces
    Calibrate(RunArgs),
    /// Risk and efficiency of a fixed threshold
    Evaluate(RunArgs),
    /// Repeated calibration/test splits with guarantee checks
    Trials(RunArgs),
    /// Trials over a list of epsilons, one CSV row each
    Curve(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate(_) => "validate",
            Command::Generate(_) => "generate",
            Command::Calibrate(_) => "calibrate",
            Command::Evaluate(_) => "evaluate",
            Command::Trials(_) => "trials",
            Command::Curve(_) => "curve",
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    let name = cli.command.name();
    let (Command::Validate(args)
    | Command::Generate(args)
    | Command::Calibrate(args)
    | Command::Evaluate(args)
    | Command::Trials(args)
    | Command::Curve(args)) = cli.command;
    let args = args.resolve(name)?;
    match name {
        "validate" => commands::validate(&args),
        "generate" => commands::generate_cmd(&args),
        "calibrate" => commands::calibrate_cmd(&args),
        "evaluate" => commands::evaluate(&args),
        "trials" => commands::trials(&args),
        _ => commands::curve(&args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
