use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cvstem_cli::{run, summarize, verify_bounds, CliError, ExperimentManifest, RunOptions};

/// Ensemble runner for the cvstem benchmarks.
#[derive(Parser)]
#[command(name = "cvstem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every controller and sampling period of a manifest.
    Run(RunArgs),
    /// Rebuild the summary table and plot data of a results directory.
    Summarize {
        /// Results directory written by `run`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a CV-STEM ensemble with its analytic error bound.
    VerifyBounds(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment manifest (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Results directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (all cores when omitted).
    #[arg(long)]
    jobs: Option<usize>,
    /// Seed of the first run; run `i` uses `seed_base + i`.
    #[arg(long, default_value_t = 0)]
    seed_base: u64,
}

impl RunArgs {
    fn load(&self) -> Result<(ExperimentManifest, RunOptions), CliError> {
        let m = ExperimentManifest::load(&self.config)?;
        Ok((m, RunOptions { out: self.out.clone(), jobs: self.jobs, seed_base: self.seed_base }))
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => {
            let (m, opts) = args.load()?;
            let outcome = run(&m, &opts)?;
            println!("controller,dt_ctrl,normalized_error,normalized_effort");
            for r in &outcome.summary {
                println!("{},{},{:.4},{:.4}", r.controller.as_str(), r.dt_ctrl, r.normalized_steady_state_error, r.normalized_control_effort);
            }
            println!("results in {}", opts.out.display());
        }
        Command::Summarize { out } => {
            for r in summarize(&out)? {
                println!("{},{},{:.4},{:.4}", r.controller.as_str(), r.dt_ctrl, r.normalized_steady_state_error, r.normalized_control_effort);
            }
        }
        Command::VerifyBounds(args) => {
            let (m, opts) = args.load()?;
            let rep = verify_bounds(&m, &opts)?;
            let line = format!(
                "{}: {:.1}% of points above bound, {:.1}% beyond the {} standard-error margin",
                rep.name,
                100.0 * rep.violation_fraction,
                100.0 * rep.hard_violation_fraction,
                rep.z
            );
            if !rep.passed {
                return Err(CliError::BoundViolated(line));
            }
            println!("{line}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
