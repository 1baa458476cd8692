//! Wiener increments, Euler-Maruyama integration of controlled Ito SDEs,
//! closed-loop simulation with zero-order hold, and ensemble statistics.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type VectorField = Arc<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;
pub type StateMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("controller failed at t = {t}: {message}")]
    Controller { t: f64, message: String },
    #[error("state diverged at t = {0}")]
    Diverged(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("reference is not dynamically feasible: {0}")]
    InfeasibleReference(String),
    #[error("no usable metric: {0}")]
    NoMetric(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Increments of a `dim`-dimensional Wiener process on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct WienerPath {
    pub dim: usize,
    pub dt: f64,
    pub increments: Vec<DVector<f64>>,
}

pub fn sample_wiener(dim: usize, steps: usize, dt: f64, seed: u64) -> Result<WienerPath, SimError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(SimError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if steps == 0 {
        return Err(SimError::InvalidArgument("at least one step is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = dt.sqrt();
    let increments = (0..steps)
        .map(|_| DVector::from_fn(dim, |_, _| { let z: f64 = StandardNormal.sample(&mut rng); sd * z }))
        .collect();
    Ok(WienerPath { dim, dt, increments })
}

/// `dx = (f(x,t) + B(x,t) u) dt + G(x,t) dW`, optionally followed by a state
/// re-chart (e.g. a switch between attitude parameter sets) after each step.
#[derive(Clone)]
pub struct SdeDefinition {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub drift: VectorField,
    pub input_matrix: MatrixField,
    pub diffusion: MatrixField,
    pub rechart: Option<StateMap>,
}

impl SdeDefinition {
    pub fn new(n: usize, m: usize, d: usize, drift: VectorField, input_matrix: MatrixField, diffusion: MatrixField) -> Self {
        Self { n, m, d, drift, input_matrix, diffusion, rechart: None }
    }

    pub fn with_rechart(mut self, rechart: StateMap) -> Self {
        self.rechart = Some(rechart);
        self
    }

    /// Max `|f(0,t)|` over the given times; zero for systems admitting an SDC form.
    pub fn drift_at_origin(&self, times: &[f64]) -> f64 {
        let zero = DVector::zeros(self.n);
        times.iter().map(|&t| (self.drift)(&zero, t).amax()).fold(0.0, f64::max)
    }
}

pub fn euler_maruyama_step(
    sde: &SdeDefinition,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
    dt: f64,
    dw: &DVector<f64>,
) -> Result<DVector<f64>, SimError> {
    if x.len() != sde.n || u.len() != sde.m || dw.len() != sde.d {
        return Err(SimError::InvalidArgument(format!(
            "expected x, u, dW of sizes ({}, {}, {}), got ({}, {}, {})",
            sde.n,
            sde.m,
            sde.d,
            x.len(),
            u.len(),
            dw.len()
        )));
    }
    let drift = (sde.drift)(x, t) + (sde.input_matrix)(x, t) * u;
    Ok(x + drift * dt + (sde.diffusion)(x, t) * dw)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePoint {
    pub x_d: DVector<f64>,
    pub x_d_dot: DVector<f64>,
}

pub trait Reference: Send + Sync {
    fn at(&self, t: f64) -> ReferencePoint;
}

/// Reference given by a closure returning `(x_d, dx_d/dt)`.
pub struct FnReference<F>(pub F);

impl<F> Reference for FnReference<F>
where
    F: Fn(f64) -> (DVector<f64>, DVector<f64>) + Send + Sync,
{
    fn at(&self, t: f64) -> ReferencePoint {
        let (x_d, x_d_dot) = (self.0)(t);
        ReferencePoint { x_d, x_d_dot }
    }
}

/// One controller sample: the re-solve decision and its outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveLogEntry {
    pub t: f64,
    /// Whether a new metric was requested at this sample.
    pub resolved: bool,
    pub reason: String,
    pub status: String,
    /// False when the controller kept its previous metric.
    pub accepted: bool,
    /// Residuals of the cached metric at the current point before deciding.
    pub riccati_residual: Option<f64>,
    pub contraction_residual: Option<f64>,
    pub objective: Option<f64>,
    pub nu: Option<f64>,
    pub gamma: Option<f64>,
    pub chi: Option<f64>,
    pub metric_min_eig: Option<f64>,
    pub metric_max_eig: Option<f64>,
    pub iterations: usize,
    pub solve_seconds: f64,
    /// The input-limited program was infeasible and the metric came from the unlimited one.
    #[serde(default)]
    pub input_limit_dropped: bool,
}

/// Per-step side information a controller may report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepDiagnostics {
    /// Extreme eigenvalues of the Lyapunov weight in use (`M`, or `H + M`).
    pub weight_extremes: Option<(f64, f64)>,
    /// Norm of the feedback part of the input (`u - u_d` or `u_s`).
    pub feedback_norm: Option<f64>,
    /// Squared norm of the controller's own error variable (e.g. the composite state).
    pub internal_error_sq: Option<f64>,
    /// Lyapunov value of the error in the weight in use (`e^T M e`, or `s^T (H + M) s`).
    pub lyapunov: Option<f64>,
    /// The input was radially scaled back onto the `u_max` ball.
    pub saturated: bool,
    pub solve: Option<SolveLogEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlOutput {
    pub u: DVector<f64>,
    pub diagnostics: StepDiagnostics,
}

impl ControlOutput {
    pub fn plain(u: DVector<f64>) -> Self {
        Self { u, diagnostics: StepDiagnostics::default() }
    }
}

pub trait Controller: Send {
    fn control(&mut self, t: f64, x: &DVector<f64>, reference: &ReferencePoint) -> Result<ControlOutput, ControlError>;
}

#[derive(Clone)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    /// Deterministic disturbance `d(x,t)` added to the drift.
    pub disturbance: Option<VectorField>,
    /// Abort when any state entry exceeds this magnitude.
    pub divergence_limit: f64,
}

impl SimConfig {
    pub fn new(dt: f64, horizon: f64, seed: u64) -> Self {
        Self { dt, horizon, seed, disturbance: None, divergence_limit: 1e8 }
    }

    pub fn steps(&self) -> Result<usize, SimError> {
        if !(self.dt > 0.0) || !(self.horizon > 0.0) {
            return Err(SimError::InvalidArgument("dt and horizon must be positive".into()));
        }
        let n = (self.horizon / self.dt).round();
        if (n * self.dt - self.horizon).abs() > 1e-9 * self.horizon.max(1.0) {
            return Err(SimError::InvalidArgument(format!(
                "dt = {} does not divide horizon = {}",
                self.dt, self.horizon
            )));
        }
        Ok(n as usize)
    }
}

/// Full record of one closed-loop run. Row `k` holds the state at `times[k]`
/// and the input the controller returned there (held until `times[k + 1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub desired_states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub error_sq: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub disturbance_sq: Vec<f64>,
    pub solve_log: Vec<SolveLogEntry>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `∫ ||u|| dt` by left-endpoint quadrature.
    pub fn control_effort(&self) -> f64 {
        self.inputs.iter().take(self.len().saturating_sub(1)).map(|u| u.norm() * self.dt).sum()
    }

    /// Mean of `||e||^2` over the last `window` recorded steps.
    pub fn steady_state_error(&self, window: usize) -> f64 {
        let w = window.min(self.error_sq.len()).max(1);
        self.error_sq[self.error_sq.len() - w..].iter().sum::<f64>() / w as f64
    }

    pub fn max_input_norm(&self) -> f64 {
        self.inputs.iter().map(|u| u.norm()).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.states.first().map_or(0, |x| x.len());
        let m = self.inputs.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..n).map(|i| format!("xd{i}")));
        header.extend((0..m).map(|i| format!("u{i}")));
        header.push("err_sq".into());
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.states[k].iter().map(|v| v.to_string()));
            row.extend(self.desired_states[k].iter().map(|v| v.to_string()));
            row.extend(self.inputs[k].iter().map(|v| v.to_string()));
            row.push(self.error_sq[k].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn simulate_closed_loop(
    sde: &SdeDefinition,
    controller: &mut dyn Controller,
    reference: &dyn Reference,
    x0: &DVector<f64>,
    cfg: &SimConfig,
) -> Result<TrajectoryRecord, SimError> {
    let steps = cfg.steps()?;
    if x0.len() != sde.n {
        return Err(SimError::InvalidArgument(format!("x0 has {} entries, expected {}", x0.len(), sde.n)));
    }
    let noise = sample_wiener(sde.d, steps, cfg.dt, cfg.seed)?;
    let mut rec = TrajectoryRecord {
        seed: cfg.seed,
        dt: cfg.dt,
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        desired_states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
        error_sq: Vec::with_capacity(steps + 1),
        diagnostics: Vec::with_capacity(steps + 1),
        disturbance_sq: Vec::with_capacity(steps + 1),
        solve_log: Vec::new(),
    };
    let mut x = match &sde.rechart {
        Some(r) => r(x0),
        None => x0.clone(),
    };
    for k in 0..=steps {
        let t = k as f64 * cfg.dt;
        let refp = reference.at(t);
        let out = controller
            .control(t, &x, &refp)
            .map_err(|e| SimError::Controller { t, message: e.to_string() })?;
        if out.u.len() != sde.m {
            return Err(SimError::Controller { t, message: format!("input has {} entries, expected {}", out.u.len(), sde.m) });
        }
        let dist = cfg.disturbance.as_ref().map(|d| d(&x, t));
        rec.times.push(t);
        rec.error_sq.push((&x - &refp.x_d).norm_squared());
        rec.states.push(x.clone());
        rec.desired_states.push(refp.x_d);
        rec.disturbance_sq.push(dist.as_ref().map_or(0.0, |d| d.norm_squared()));
        if let Some(entry) = &out.diagnostics.solve {
            rec.solve_log.push(entry.clone());
        }
        rec.diagnostics.push(out.diagnostics);
        if k < steps {
            let mut next = euler_maruyama_step(sde, &x, &out.u, t, cfg.dt, &noise.increments[k])?;
            if let Some(d) = dist {
                next += d * cfg.dt;
            }
            if let Some(r) = &sde.rechart {
                next = r(&next);
            }
            if !next.iter().all(|v| v.is_finite() && v.abs() < cfg.divergence_limit) {
                return Err(SimError::Diverged(t + cfg.dt));
            }
            x = next;
        }
        rec.inputs.push(out.u);
    }
    Ok(rec)
}

/// Per-step sample mean and standard error of a scalar series over an ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSeries {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub runs: usize,
}

impl EnsembleSeries {
    pub fn from_series(times: &[f64], series: &[Vec<f64>]) -> Result<Self, SimError> {
        if series.len() < 2 {
            return Err(SimError::InvalidArgument("at least two runs are required".into()));
        }
        let len = times.len();
        if series.iter().any(|s| s.len() != len) {
            return Err(SimError::InvalidArgument("runs have different lengths".into()));
        }
        let r = series.len() as f64;
        let mut mean = vec![0.0; len];
        let mut std_err = vec![0.0; len];
        for k in 0..len {
            let m = series.iter().map(|s| s[k]).sum::<f64>() / r;
            let var = series.iter().map(|s| (s[k] - m).powi(2)).sum::<f64>() / (r - 1.0);
            mean[k] = m;
            std_err[k] = (var / r).sqrt();
        }
        Ok(Self { times: times.to_vec(), mean, std_err, runs: series.len() })
    }

    /// `mean + z * std_err` at every step.
    pub fn upper(&self, z: f64) -> Vec<f64> {
        self.mean.iter().zip(&self.std_err).map(|(m, s)| m + z * s).collect()
    }
}

/// Mean squared tracking error `||x - x_d||^2` across runs on a common grid.
pub fn monte_carlo_mse(records: &[TrajectoryRecord]) -> Result<EnsembleSeries, SimError> {
    let Some(first) = records.first() else {
        return Err(SimError::InvalidArgument("no records".into()));
    };
    for r in records {
        if r.times.len() != first.times.len()
            || r.times.iter().zip(&first.times).any(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + b.abs()))
        {
            return Err(SimError::InvalidArgument("records have mismatched time grids".into()));
        }
    }
    let series: Vec<Vec<f64>> = records.iter().map(|r| r.error_sq.clone()).collect();
    EnsembleSeries::from_series(&first.times, &series)
}

/// Trailing moving average: entry `k` averages `values[k+1-window ..= k]`
/// (fewer points at the start).
pub fn trailing_moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for k in 0..values.len() {
        acc += values[k];
        if k >= w {
            acc -= values[k - w];
        }
        out.push(acc / (k + 1).min(w) as f64);
    }
    out
}

/// Runs `n_runs` independent jobs with seeds `seed_base + i`, in parallel on
/// at most `jobs` threads (all cores when `None`). Results keep seed order.
pub fn run_ensemble<T, F>(n_runs: usize, seed_base: u64, jobs: Option<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    let work = || (0..n_runs).into_par_iter().map(|i| f(seed_base + i as u64)).collect::<Vec<T>>();
    match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map(|pool| pool.install(work))
            .unwrap_or_else(|_| work()),
        None => work(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou(a: f64, g: f64) -> SdeDefinition {
        SdeDefinition::new(
            1,
            1,
            1,
            Arc::new(move |x, _| x * -a),
            Arc::new(|_, _| DMatrix::zeros(1, 1)),
            Arc::new(move |_, _| DMatrix::from_element(1, 1, g)),
        )
    }

    #[test]
    fn deterministic_euler_step() {
        let sde = ou(1.0, 0.0);
        let x = DVector::from_element(1, 1.0);
        let next = euler_maruyama_step(&sde, &x, &DVector::zeros(1), 0.0, 0.1, &DVector::zeros(1)).unwrap();
        assert!((next[0] - 0.9).abs() < 1e-15);
        let same = euler_maruyama_step(&sde, &x, &DVector::zeros(1), 0.0, 0.0, &DVector::zeros(1)).unwrap();
        assert_eq!(same, x);
    }

    #[test]
    fn step_rejects_wrong_noise_dimension() {
        let sde = ou(1.0, 0.5);
        let x = DVector::from_element(1, 1.0);
        assert!(euler_maruyama_step(&sde, &x, &DVector::zeros(1), 0.0, 0.1, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn wiener_rejects_bad_arguments() {
        assert!(sample_wiener(1, 10, 0.0, 1).is_err());
        assert!(sample_wiener(1, 0, 0.1, 1).is_err());
    }

    #[test]
    fn moving_average_is_trailing() {
        let v = trailing_moving_average(&[1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(v, vec![1.0, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn mse_of_two_runs_is_their_mean() {
        let s = EnsembleSeries::from_series(&[0.0], &[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(s.mean, vec![2.0]);
    }
}
