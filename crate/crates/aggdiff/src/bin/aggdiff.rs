//! Command-line front end: wires JSON configs to the library operations.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aggdiff::commands::{self, Command};

#[derive(Parser)]
#[command(
    name = "aggdiff",
    version,
    about = "Steady states and functional-parameter recovery for nonlocal aggregation-diffusion equations"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// Path to the JSON config for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; fans out to every stochastic component.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Enumerate steady states and write one CSV per state.
    Solve,
    /// Generate downsampled, noisy observation files from solved states.
    Synth,
    /// Recover unknown components from observation files.
    Fit,
    /// Predict bifurcation points and sweep a kappa range.
    Bifurcate,
    /// Spectrum, deconvolution, and compensation diagnostics.
    Diagnose,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.cmd {
        Cmd::Solve => Command::Solve,
        Cmd::Synth => Command::Synth,
        Cmd::Fit => Command::Fit,
        Cmd::Bifurcate => Command::Bifurcate,
        Cmd::Diagnose => Command::Diagnose,
    };
    let Some(config) = cli.config else {
        eprintln!("error: --config <path> is required");
        return ExitCode::from(2);
    };
    let out = cli.out.unwrap_or_else(|| PathBuf::from("out"));
    match commands::run(command, &config, &out, cli.seed, cli.threads) {
        Ok(manifest) => {
            println!(
                "{}: wrote {} output file(s) to {} in {:.2}s",
                manifest.command,
                manifest.outputs.len(),
                out.display(),
                manifest.wall_clock_seconds
            );
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(commands::exit_code_for(command, &err) as u8)
        }
    }
}
