use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dne_core::conic::SolveStatus;
use dne_core::Error;

mod commands;
mod opts;

use opts::{Opts, UsageError};

/// Do-not-exceed limits for renewable injections.
#[derive(Parser)]
#[command(name = "dne", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the DNE model and write the solution and a summary.
    Solve(Opts),
    /// Solve over a δ schedule and write the frontier and range tables.
    Sweep(Opts),
    /// Score a solution on out-of-sample scenarios.
    Evaluate(Opts),
    /// Compare against the fixed-dispatch baseline.
    Baseline(Opts),
    /// Audit J(τ) against the moment LP and its CPLA.
    Jtau(Opts),
    /// Fit moments on the history calibration split.
    Calibrate(Opts),
}

const USAGE: u8 = 2;
const DATA: u8 = 3;
const INFEASIBLE: u8 = 4;
const NUMERICAL: u8 = 5;

fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    if err.downcast_ref::<UsageError>().is_some() {
        return (USAGE, "usage");
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::OutOfRegime(_)) => (USAGE, "usage"),
        Some(Error::Parse { .. } | Error::Invariant { .. } | Error::Series(_) | Error::Network(_)) => (DATA, "parse"),
        Some(Error::Io(_)) => (DATA, "io"),
        Some(Error::Solve { status: SolveStatus::Infeasible | SolveStatus::Unbounded, .. }) => (INFEASIBLE, "infeasible"),
        Some(_) => (NUMERICAL, "numerical"),
        None if err.downcast_ref::<std::io::Error>().is_some() => (DATA, "io"),
        None => (NUMERICAL, "numerical"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, raw) = match cli.command {
        Command::Solve(o) => ("solve", o),
        Command::Sweep(o) => ("sweep", o),
        Command::Evaluate(o) => ("evaluate", o),
        Command::Baseline(o) => ("baseline", o),
        Command::Jtau(o) => ("jtau", o),
        Command::Calibrate(o) => ("calibrate", o),
    };
    let run = raw.resolve().and_then(|o| match name {
        "solve" => commands::solve(&o),
        "sweep" => commands::sweep_cmd(&o),
        "evaluate" => commands::evaluate_cmd(&o),
        "baseline" => commands::baseline(&o),
        "jtau" => commands::jtau(&o),
        _ => commands::calibrate_cmd(&o),
    });
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, category) = exit_code(&e);
            eprintln!("error [{category}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
