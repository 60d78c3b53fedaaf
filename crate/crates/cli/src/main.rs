//! Batch experiment runner for the finite-state mean field game toolkit.
//!
//! Exit codes: 0 on success, 2 on configuration/validation failures, 3 on
//! solver failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfg_core::error::Error;
use mfg_core::Workers;

#[derive(Parser)]
#[command(name = "mfg", version, about = "Finite-state mean field games on the simplex")]
struct Cli {
    /// Experiment configuration file (sectioned key = value).
    #[arg(long, global = true, default_value = "mfg.conf")]
    config: PathBuf,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed override for Monte-Carlo streams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the noise-free planner value on the lattice.
    Hjb,
    /// Planner minimisers from the configured start point.
    Mfcp,
    /// Multistart equilibrium search.
    Mfg,
    /// Viscous bundle (value, gradient, mean value, correction, per-state
    /// values) at one intensity, plus its equilibrium ensemble.
    Viscous,
    /// Vanishing-viscosity sweep with the convergence report.
    Sweep,
    /// Two-state conservation-law benchmark.
    Conslaw,
    /// Certify a candidate field CSV against the admissibility clauses.
    Certify {
        /// Grid-field CSV to certify.
        #[arg(long)]
        field: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    let sections = config::parse_file(&cli.config)?;
    let exp = config::resolve(sections, cli.seed)?;
    let ctx = commands::RunContext {
        exp,
        out_dir: cli.out,
        workers: Workers::new(cli.threads),
        command: match &cli.command {
            Command::Hjb => "hjb",
            Command::Mfcp => "mfcp",
            Command::Mfg => "mfg",
            Command::Viscous => "viscous",
            Command::Sweep => "sweep",
            Command::Conslaw => "conslaw",
            Command::Certify { .. } => "certify",
        }
        .to_string(),
    };
    match cli.command {
        Command::Hjb => commands::cmd_hjb(&ctx),
        Command::Mfcp => commands::cmd_mfcp(&ctx),
        Command::Mfg => commands::cmd_mfg(&ctx),
        Command::Viscous => commands::cmd_viscous(&ctx),
        Command::Sweep => commands::cmd_sweep(&ctx),
        Command::Conslaw => commands::cmd_conslaw(&ctx),
        Command::Certify { field } => commands::cmd_certify(&ctx, &field),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::InvalidConfig(_)
                | Error::InvalidModel(_)
                | Error::InvalidPoint(_)
                | Error::Parse(_)
                | Error::Cfl(_) => 2,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}
