mod commands;
mod output;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::commands::{
    DecodeCmd, DiagnoseCmd, ExactnessCmd, GenModelCmd, Outcome, SweepCmd, TheoremCmd,
};

/// Speculative decoding lab on synthetic Markov token models.
#[derive(Debug, Parser)]
#[command(name = "gsdlab", version, about)]
struct Cli {
    /// Directory for output files and manifests.
    #[arg(long, global = true, env = "GSDLAB_OUT_DIR", default_value = "gsdlab-out")]
    out_dir: PathBuf,
    /// Worker threads for trials and sweeps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// JSON file with default values for any flag; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one decode and write its trace and per-position diagnostics.
    Decode(DecodeCmd),
    /// Monte Carlo check of a method's sequence law against exact ancestral sampling.
    VerifyExactness(ExactnessCmd),
    /// Check the acceptance-rate identity and the grouping TV inequality on random inputs.
    TheoremCheck(TheoremCmd),
    /// Run a grid of methods and parameters over many seeds.
    Sweep(SweepCmd),
    /// Per-position pmf diagnostics and grouped acceptance uplift of one speculative decode.
    Diagnose(DiagnoseCmd),
    /// Generate a toy model and save it as JSON.
    GenModel(GenModelCmd),
}

/// Command line without the output directory, so a manifest can be replayed elsewhere.
fn replay_args() -> Vec<String> {
    let mut out = Vec::new();
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        if a == "--out-dir" {
            args.next();
        } else if !a.starts_with("--out-dir=") {
            out.push(a);
        }
    }
    out
}

fn run(cli: Cli) -> Result<Outcome> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global()?;
    }
    let ctx = commands::Context {
        out_dir: cli.out_dir,
        config: cli.config,
        args: replay_args(),
    };
    match cli.command {
        Command::Decode(c) => c.run(&ctx),
        Command::VerifyExactness(c) => c.run(&ctx),
        Command::TheoremCheck(c) => c.run(&ctx),
        Command::Sweep(c) => c.run(&ctx),
        Command::Diagnose(c) => c.run(&ctx),
        Command::GenModel(c) => c.run(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Passed) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(why)) => {
            eprintln!("check failed: {why}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
