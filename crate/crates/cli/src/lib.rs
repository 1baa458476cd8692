//! Experiment runner behind the `cvstem` binary.

pub mod manifest;
pub mod runner;
pub mod summary;

use thiserror::Error;

pub use manifest::ExperimentManifest;
pub use runner::{run, verify_bounds, RunOptions, RunOutcome};
pub use summary::summarize;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("no data: {0}")]
    NoData(String),
    #[error("solver failure fraction {fraction:.3} exceeds threshold {threshold}")]
    SolverFailures { fraction: f64, threshold: f64 },
    #[error("bound violated: {0}")]
    BoundViolated(String),
    #[error("run failed: {0}")]
    Run(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::SolverFailures { .. } => 3,
            _ => 1,
        }
    }
}
