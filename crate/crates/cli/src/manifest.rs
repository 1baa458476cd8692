//! Experiment manifests: one TOML file per study.

use std::path::Path;

use cvstem::benchmarks::{BenchmarkConfig, ControllerKind, STEADY_STATE_WINDOW};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// A study: one benchmark config, the controllers to compare on it and the
/// controller sampling periods to sweep. Every run of the study uses seeds
/// `seed_base .. seed_base + n_runs`, shared across controllers and periods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    /// Controllers to run; `config.controller` is ignored by `run`.
    pub controllers: Vec<ControllerKind>,
    /// `dt_ctrl` values. Empty means `config.dt_ctrl` only.
    #[serde(default)]
    pub sweep: Vec<f64>,
    /// Number of trailing recorded steps averaged for the steady-state error.
    #[serde(default = "default_window")]
    pub steady_state_window: usize,
    /// Trailing moving-average window of the mean error traces.
    #[serde(default = "default_window")]
    pub moving_average_window: usize,
    /// Largest tolerated fraction of failed metric solves (or failed runs).
    #[serde(default = "default_failure_threshold")]
    pub failure_threshold: f64,
    /// Also write one trajectory CSV per run.
    #[serde(default = "yes")]
    pub write_trajectories: bool,
    pub config: BenchmarkConfig,
}

fn default_runs() -> usize {
    60
}

fn default_window() -> usize {
    STEADY_STATE_WINDOW
}

fn default_failure_threshold() -> f64 {
    0.1
}

fn yes() -> bool {
    true
}

impl ExperimentManifest {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let m: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.n_runs == 0 {
            return Err(CliError::Config("n_runs must be at least 1".into()));
        }
        if self.controllers.is_empty() {
            return Err(CliError::Config("controllers must not be empty".into()));
        }
        if self.steady_state_window == 0 || self.moving_average_window == 0 {
            return Err(CliError::Config("averaging windows must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_threshold) {
            return Err(CliError::Config("failure_threshold must lie in [0, 1]".into()));
        }
        for cfg in self.configs()? {
            cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Sweep values, sorted and deduplicated.
    pub fn periods(&self) -> Vec<f64> {
        let mut p = if self.sweep.is_empty() { vec![self.config.dt_ctrl] } else { self.sweep.clone() };
        p.sort_by(f64::total_cmp);
        p.dedup();
        p
    }

    /// Controllers in canonical order, deduplicated.
    pub fn controller_list(&self) -> Vec<ControllerKind> {
        let mut c = self.controllers.clone();
        c.sort();
        c.dedup();
        c
    }

    /// One config per (controller, period) pair, controller-major.
    pub fn configs(&self) -> Result<Vec<BenchmarkConfig>, CliError> {
        let mut out = Vec::new();
        for controller in self.controller_list() {
            for dt_ctrl in self.periods() {
                if !(dt_ctrl > 0.0) {
                    return Err(CliError::Config(format!("sweep value {dt_ctrl} must be positive")));
                }
                out.push(BenchmarkConfig { controller, dt_ctrl, ..self.config.clone() });
            }
        }
        Ok(out)
    }

    /// SHA-256 of the canonical JSON form, so formatting and key order in
    /// the TOML file do not change it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&json))
    }
}
