//! Feedback laws built on solved metrics, the re-solve policy, and the
//! min-norm CLF controller.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{eig_extremes, lambda_min, pinv, spd_inverse, spectral_norm, sym};
use crate::program::{
    CvstemProgram,
    add_input_norm_constraint, assemble_general_program, assemble_lagrangian_program, reconstruct_metric, solve, verify_lagrangian_feasibility,
    verify_nonconvex_feasibility, CvstemParams, FeasibilityReport, LagrangianParams, LagrangianPoint, MetricRate, MetricSolution, PointData,
    ProgramError, RateConvention,
};
use crate::sdc::{finite_difference_phi, SdcForm};
use crate::sdp::{SdpBackend, SdpStatus};
use crate::sim::{ControlError, ControlOutput, Controller, MatrixField, ReferencePoint, SdeDefinition, SolveLogEntry, StepDiagnostics, VectorField};

/// `u_d = B(x_d)^+ (dx_d/dt - f(x_d))`. Fails when the residual of the
/// least-squares fit exceeds `tol * (1 + ||dx_d/dt - f(x_d)||)`.
pub fn desired_input(sde: &SdeDefinition, x_d: &DVector<f64>, x_d_dot: &DVector<f64>, t: f64, tol: f64) -> Result<DVector<f64>, ControlError> {
    let target = x_d_dot - (sde.drift)(x_d, t);
    let b = (sde.input_matrix)(x_d, t);
    let u_d = pinv(&b) * &target;
    let resid = (&b * &u_d - &target).norm();
    if resid > tol * (1.0 + target.norm()) {
        return Err(ControlError::InfeasibleReference(format!("least-squares residual {resid:.3e} at t = {t}")));
    }
    Ok(u_d)
}

/// `-R^{-1} B^T M e`.
pub fn feedback(m: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, e: &DVector<f64>) -> Result<DVector<f64>, ControlError> {
    let rinv = spd_inverse(r).ok_or_else(|| ControlError::InvalidArgument("input weight is not positive definite".into()))?;
    Ok(-(rinv * b.transpose() * (m * e)))
}

/// `u = -R^{-1} B^T M (x - x_d) + u_d`.
pub fn general_control(
    m: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    u_d: &DVector<f64>,
) -> Result<DVector<f64>, ControlError> {
    Ok(feedback(m, b, r, &(x - x_d))? + u_d)
}

/// Symmetrized `(current - previous) / dt`.
pub fn backward_difference_w(current: &DMatrix<f64>, previous: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    assert!(dt > 0.0, "backward difference needs dt > 0");
    sym(&((current - previous) / dt))
}

/// Mechanical system `H(q) dq' + (C(q,q') q' + G(q)) dt = B(q,q') u dt + Gamma(x,t) dW`.
#[derive(Clone)]
pub struct LagrangianSystem {
    pub dof: usize,
    pub m: usize,
    pub d: usize,
    pub inertia: Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    pub coriolis: Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    pub gravity: Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    pub actuation: Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    /// `Gamma(x,t)` with `x = [q; q']`.
    pub noise: MatrixField,
}

impl LagrangianSystem {
    pub fn split<'a>(&self, x: &'a DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (x.rows(0, self.dof).into_owned(), x.rows(self.dof, self.dof).into_owned())
    }

    /// State-space form in `x = [q; q']`.
    pub fn to_sde(&self) -> SdeDefinition {
        let n = self.dof;
        let (s1, s2, s3) = (self.clone(), self.clone(), self.clone());
        let drift: VectorField = Arc::new(move |x, _t| {
            let (q, qd) = s1.split(x);
            let hinv = spd_inverse(&sym(&(s1.inertia)(&q))).expect("inertia must be positive definite");
            let acc = -hinv * ((s1.coriolis)(&q, &qd) * &qd + (s1.gravity)(&q));
            let mut out = DVector::zeros(2 * n);
            out.rows_mut(0, n).copy_from(&qd);
            out.rows_mut(n, n).copy_from(&acc);
            out
        });
        let input: MatrixField = Arc::new(move |x, _t| {
            let (q, qd) = s2.split(x);
            let hinv = spd_inverse(&sym(&(s2.inertia)(&q))).expect("inertia must be positive definite");
            let mut out = DMatrix::zeros(2 * n, s2.m);
            out.view_mut((n, 0), (n, s2.m)).copy_from(&(hinv * (s2.actuation)(&q, &qd)));
            out
        });
        let diffusion: MatrixField = Arc::new(move |x, t| {
            let (q, _) = s3.split(x);
            let hinv = spd_inverse(&sym(&(s3.inertia)(&q))).expect("inertia must be positive definite");
            let mut out = DMatrix::zeros(2 * n, s3.d);
            out.view_mut((n, 0), (n, s3.d)).copy_from(&(hinv * (s3.noise)(x, t)));
            out
        });
        SdeDefinition::new(2 * n, self.m, self.d, drift, input, diffusion)
    }
}

/// `Lambda` and the damping gain `K(t)` of the nominal controller.
#[derive(Clone)]
pub struct LagrangianGains {
    pub lambda: DMatrix<f64>,
    pub k: Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>,
}

impl LagrangianGains {
    pub fn constant(lambda: DMatrix<f64>, k: DMatrix<f64>) -> Self {
        Self { lambda, k: Arc::new(move |_| k.clone()) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LagrangianControl {
    pub u: DVector<f64>,
    pub u_n: DVector<f64>,
    pub u_s: DVector<f64>,
    /// Composite error `s = q' - q'_r`.
    pub s: DVector<f64>,
    pub qd_r: DVector<f64>,
    pub qdd_r: DVector<f64>,
}

/// Tracking reference in configuration space.
#[derive(Clone, Debug, PartialEq)]
pub struct JointReference {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub qdd: DVector<f64>,
}

impl JointReference {
    /// Reads `x_d = [q_d; q'_d]`, `dx_d/dt = [q'_d; q''_d]`.
    pub fn from_point(p: &ReferencePoint, dof: usize) -> Self {
        Self { q: p.x_d.rows(0, dof).into_owned(), qd: p.x_d.rows(dof, dof).into_owned(), qdd: p.x_d_dot.rows(dof, dof).into_owned() }
    }
}

/// Composite variable and nominal controller `u_n = B^+ (H q''_r + C q'_r + G - K s)`,
/// plus `u_s = -R^{-1} B^T M s` with `B = H^{-1} b_cal` when a metric is given.
#[allow(clippy::too_many_arguments)]
pub fn lagrangian_control(
    system: &LagrangianSystem,
    gains: &LagrangianGains,
    metric: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
    q: &DVector<f64>,
    qd: &DVector<f64>,
    reference: &JointReference,
    t: f64,
) -> Result<LagrangianControl, ControlError> {
    let e = q - &reference.q;
    let qd_r = &reference.qd - &gains.lambda * &e;
    let qdd_r = &reference.qdd - &gains.lambda * (qd - &reference.qd);
    let s = qd - &qd_r;
    let h = (system.inertia)(q);
    let c = (system.coriolis)(q, qd);
    let b_cal = (system.actuation)(q, qd);
    let b_pinv = pinv(&b_cal);
    let n = system.dof;
    if (&b_cal * &b_pinv - DMatrix::identity(n, n)).norm() > 1e-8 {
        return Err(ControlError::InvalidArgument("actuation matrix is not right-invertible".into()));
    }
    let u_n = &b_pinv * (&h * &qdd_r + &c * &qd_r + (system.gravity)(q) - (gains.k)(t) * &s);
    let u_s = match metric {
        Some((m, r)) => {
            let hinv = spd_inverse(&sym(&h)).ok_or_else(|| ControlError::InvalidArgument("inertia is not positive definite".into()))?;
            feedback(m, &(hinv * &b_cal), r, &s)?
        }
        None => DVector::zeros(system.m),
    };
    Ok(LagrangianControl { u: &u_n + &u_s, u_n, u_s, s, qd_r, qdd_r })
}

/// Admissible set for the stochastic input in the CLF program.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSet {
    Unconstrained,
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { radius: f64 },
}

impl InputSet {
    fn validate(&self, m: usize) -> Result<(), ControlError> {
        match self {
            InputSet::Unconstrained => Ok(()),
            InputSet::Box { lower, upper } => {
                if lower.len() != m || upper.len() != m {
                    return Err(ControlError::InvalidArgument("box bounds have the wrong length".into()));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
                    return Err(ControlError::InvalidArgument("input set is empty".into()));
                }
                Ok(())
            }
            InputSet::Ball { radius } => {
                if !(*radius >= 0.0) {
                    return Err(ControlError::InvalidArgument("input set is empty".into()));
                }
                Ok(())
            }
        }
    }

    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        match self {
            InputSet::Unconstrained => u.clone(),
            InputSet::Box { lower, upper } => DVector::from_fn(u.len(), |i, _| u[i].clamp(lower[i], upper[i])),
            InputSet::Ball { radius } => {
                let nrm = u.norm();
                if nrm > *radius {
                    u * (*radius / nrm)
                } else {
                    u.clone()
                }
            }
        }
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        (self.project(u) - u).norm() <= tol
    }
}

/// Data of the CLF decrease condition `a + g^T u_s <= delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClfCondition {
    /// `s^T (2 alpha_l (H + M) + dM + M A + A^T M + 2 alpha_gamma I) s`.
    pub a: f64,
    /// `2 (b_cal + M B)^T s`.
    pub g: DVector<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn clf_condition(
    m: &DMatrix<f64>,
    m_dot: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    b_cal: &DMatrix<f64>,
    h: &DMatrix<f64>,
    s: &DVector<f64>,
    params: &LagrangianParams,
) -> ClfCondition {
    let n = m.nrows();
    let ma = m * a;
    let q = (h + m) * (2.0 * params.alpha_ell) + m_dot + &ma + ma.transpose() + DMatrix::identity(n, n) * (2.0 * params.alpha_gamma);
    let a_val = s.dot(&(q * s));
    let g = (b_cal + m * b).transpose() * s * 2.0;
    ClfCondition { a: a_val, g }
}

/// Minimizer of `|u|^2 + delta^2` subject to `a + g^T u <= delta`, `u` in `set`.
///
/// Unconstrained inputs use `delta = 0` and the closed-form minimum-norm
/// point of the half-space. Otherwise the optimality conditions reduce to
/// `u = P(-sigma g)`, `delta = sigma = max(0, a + g^T u)`, a scalar fixed
/// point solved by bisection.
pub fn min_norm_clf_control(cond: &ClfCondition, set: &InputSet) -> Result<(DVector<f64>, f64), ControlError> {
    let m = cond.g.len();
    set.validate(m)?;
    let g = &cond.g;
    let gg = g.norm_squared();
    if let InputSet::Unconstrained = set {
        if cond.a <= 0.0 {
            return Ok((DVector::zeros(m), 0.0));
        }
        if gg == 0.0 {
            return Ok((DVector::zeros(m), cond.a));
        }
        return Ok((-g * (cond.a / gg), 0.0));
    }
    let h = |sigma: f64| cond.a + g.dot(&set.project(&(-g * sigma)));
    if h(0.0) <= 0.0 {
        return Ok((set.project(&DVector::zeros(m)), 0.0));
    }
    // sigma - h(sigma) is increasing; its root lies in (0, h(0)].
    let (mut lo, mut hi) = (0.0, h(0.0));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid - h(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.max(1.0) {
            break;
        }
    }
    let sigma = 0.5 * (lo + hi);
    let u = set.project(&(-g * sigma));
    let delta = (cond.a + g.dot(&u)).max(0.0);
    Ok((u, delta))
}

/// When a controller solves for a new metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResolvePolicy {
    EveryStep,
    /// Re-solve only when a residual of the cached metric at the current
    /// point exceeds `residual_tol`, or its objective exceeds the last
    /// accepted one by more than `objective_slack`.
    Relaxed { residual_tol: f64, objective_slack: f64 },
}

impl Default for ResolvePolicy {
    fn default() -> Self {
        ResolvePolicy::Relaxed { residual_tol: 1e-6, objective_slack: 0.0 }
    }
}

/// Why a re-solve was requested.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResolveReason {
    Initial,
    EveryStep,
    Residual,
    Objective,
    InputLimit,
}

impl ResolveReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            ResolveReason::Initial => "initial",
            ResolveReason::EveryStep => "every-step",
            ResolveReason::Residual => "residual",
            ResolveReason::Objective => "objective",
            ResolveReason::InputLimit => "input-limit",
        }
    }
}

/// Relaxed-policy test on the cached metric. Residuals are compared on the
/// scale-normalized values of the report.
pub fn relaxed_resolve_decision(policy: &ResolvePolicy, report: &FeasibilityReport, current_objective: f64, last_objective: f64) -> Option<ResolveReason> {
    match policy {
        ResolvePolicy::EveryStep => Some(ResolveReason::EveryStep),
        ResolvePolicy::Relaxed { residual_tol, objective_slack } => {
            if report.riccati_relative() > *residual_tol || -report.contraction_relative() > *residual_tol {
                Some(ResolveReason::Residual)
            } else if current_objective > last_objective + objective_slack {
                Some(ResolveReason::Objective)
            } else {
                None
            }
        }
    }
}

/// How `dW~/dt` is supplied to each solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMode {
    Ignore,
    /// Difference quotient of the two most recent accepted `W~`.
    #[default]
    FixedBackward,
    /// `(W~ - W~_last) / (t - t_last)` with the new `W~` as decision variable.
    ImplicitBackward,
}

/// Input bound enforced through the metric program.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputLimit {
    pub u_max: f64,
    /// Bound the feedback part only (`u - u_d`, or `u_s`) rather than the total input.
    pub feedback_only: bool,
    /// Test the sufficient condition at every call rather than only at samples.
    #[serde(default = "default_true")]
    pub check_every_step: bool,
}

fn default_true() -> bool {
    true
}

impl InputLimit {
    /// The sufficient condition `nu ||R^{-1} B^T|| ||e|| <= (u_max - |u_ff|) lambda_min(W~)`.
    pub fn holds(&self, sol: &MetricSolution, b: &DMatrix<f64>, r: &DMatrix<f64>, e: &DVector<f64>, ff_norm: f64) -> bool {
        let budget = self.u_max - if self.feedback_only { 0.0 } else { ff_norm };
        let gain = spd_inverse(r).map(|ri| spectral_norm(&(ri * b.transpose()))).unwrap_or(f64::INFINITY);
        sol.nu * gain * e.norm() <= budget * lambda_min(&sol.w_tilde) * (1.0 + 1e-9)
    }

    /// Scales the limited part (`fb`, or `ff + fb`) radially back to `u_max`.
    /// Returns the total input and whether scaling was needed.
    pub fn saturate(&self, ff: &DVector<f64>, fb: &DVector<f64>) -> (DVector<f64>, bool) {
        if self.feedback_only {
            let n = fb.norm();
            if n > self.u_max {
                return (ff + fb * (self.u_max / n), true);
            }
            return (ff + fb, false);
        }
        let u = ff + fb;
        let n = u.norm();
        if n > self.u_max {
            (u * (self.u_max / n), true)
        } else {
            (u, false)
        }
    }

    /// Whether any metric can meet the condition, i.e. the feedforward leaves a positive budget.
    pub fn attainable(&self, ff_norm: f64) -> bool {
        self.u_max - self.ff_norm(ff_norm) > 0.0
    }

    fn ff_norm(&self, ff_norm: f64) -> f64 {
        if self.feedback_only {
            0.0
        } else {
            ff_norm
        }
    }
}

#[derive(Clone, Debug)]
struct AcceptedMetric {
    t: f64,
    solution: MetricSolution,
    m: DMatrix<f64>,
    gamma: f64,
}

/// Cached metric history and the re-solve bookkeeping shared by both controllers.
#[derive(Clone, Debug, Default)]
struct MetricCache {
    current: Option<AcceptedMetric>,
    previous: Option<AcceptedMetric>,
    next_sample: f64,
}

impl MetricCache {
    fn rate(&self, mode: RateMode, t: f64) -> MetricRate {
        match (mode, &self.current, &self.previous) {
            (RateMode::FixedBackward, Some(c), Some(p)) if c.t > p.t => {
                MetricRate::Fixed(backward_difference_w(&c.solution.w_tilde, &p.solution.w_tilde, c.t - p.t))
            }
            (RateMode::ImplicitBackward, Some(c), _) if t > c.t => MetricRate::BackwardDifference { previous: c.solution.w_tilde.clone(), dt: t - c.t },
            _ => MetricRate::Zero,
        }
    }

    /// `dM/dt` between the two most recent accepted metrics.
    fn metric_rate(&self) -> Option<DMatrix<f64>> {
        match (&self.current, &self.previous) {
            (Some(c), Some(p)) if c.t > p.t => Some(sym(&((&c.m - &p.m) / (c.t - p.t)))),
            _ => None,
        }
    }

    fn accept(&mut self, t: f64, solution: MetricSolution) -> Result<(), ProgramError> {
        let (m, gamma) = reconstruct_metric(&solution)?;
        self.previous = self.current.take();
        self.current = Some(AcceptedMetric { t, solution, m, gamma });
        Ok(())
    }
}

fn log_entry(t: f64, reason: Option<ResolveReason>, report: Option<&FeasibilityReport>) -> SolveLogEntry {
    SolveLogEntry {
        t,
        resolved: reason.is_some(),
        reason: reason.map_or("none", |r| r.as_str()).to_string(),
        status: "cached".to_string(),
        accepted: false,
        riccati_residual: report.map(|r| r.riccati_relative()),
        contraction_residual: report.map(|r| r.contraction_relative()),
        objective: None,
        nu: None,
        gamma: None,
        chi: None,
        metric_min_eig: None,
        metric_max_eig: None,
        iterations: 0,
        solve_seconds: 0.0,
        input_limit_dropped: false,
    }
}

fn status_name(s: SdpStatus) -> &'static str {
    match s {
        SdpStatus::Optimal => "optimal",
        SdpStatus::Infeasible => "infeasible",
        SdpStatus::Inaccurate => "inaccurate",
    }
}

/// Runs a solve, accepts it when usable, and fills the log entry. Failures
/// keep the previous metric.
fn attempt(cache: &mut MetricCache, t: f64, solved: Result<MetricSolution, ProgramError>, entry: &mut SolveLogEntry) {
    match solved {
        Ok(sol) => {
            entry.status = status_name(sol.status).to_string();
            entry.iterations = sol.iterations;
            entry.solve_seconds = sol.solve_seconds;
            if sol.is_usable() {
                entry.objective = Some(sol.tau);
                entry.nu = Some(sol.nu);
                entry.chi = Some(sol.chi);
                match cache.accept(t, sol) {
                    Ok(()) => {
                        let c = cache.current.as_ref().expect("just accepted");
                        let (lo, hi) = eig_extremes(&c.m);
                        entry.accepted = true;
                        entry.gamma = Some(c.gamma);
                        entry.metric_min_eig = Some(lo);
                        entry.metric_max_eig = Some(hi);
                    }
                    Err(e) => entry.status = format!("rejected: {e}"),
                }
            }
        }
        Err(e) => entry.status = format!("error: {e}"),
    }
    if !entry.accepted {
        log::warn!("metric update at t = {t} not accepted ({}); keeping the previous metric", entry.status);
    }
}

/// Solves the input-limited program, falling back to the unlimited one when
/// the limited program has no usable solution. The flag reports the fallback.
fn with_limit_fallback(
    limited: Option<Result<CvstemProgram, ProgramError>>,
    unlimited: impl Fn() -> Result<CvstemProgram, ProgramError>,
    backend: &mut dyn SdpBackend,
) -> (Result<MetricSolution, ProgramError>, bool) {
    if let Some(prog) = limited {
        let solved = prog.and_then(|p| solve(&p, backend));
        if matches!(&solved, Ok(sol) if sol.is_usable()) {
            return (solved, false);
        }
        return (unlimited().and_then(|p| solve(&p, backend)), true);
    }
    (unlimited().and_then(|p| solve(&p, backend)), false)
}

/// Shared controller settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerSettings {
    pub policy: ResolvePolicy,
    /// Time between policy evaluations.
    pub sample_period: f64,
    pub rate_mode: RateMode,
    pub rate_convention: RateConvention,
    pub input_limit: Option<InputLimit>,
    /// Tolerance of the reference feasibility check.
    pub reference_tol: f64,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self {
            policy: ResolvePolicy::default(),
            sample_period: 0.0,
            rate_mode: RateMode::default(),
            rate_convention: RateConvention::default(),
            input_limit: None,
            reference_tol: 1e-6,
        }
    }
}

/// Metric-based tracking controller for a general SDC system.
pub struct CvstemController {
    pub sde: SdeDefinition,
    pub sdc: SdcForm,
    pub weight: MatrixField,
    pub params: CvstemParams,
    pub settings: ControllerSettings,
    backend: Box<dyn SdpBackend>,
    cache: MetricCache,
}

impl CvstemController {
    pub fn new(sde: SdeDefinition, sdc: SdcForm, weight: MatrixField, params: CvstemParams, settings: ControllerSettings, backend: Box<dyn SdpBackend>) -> Self {
        Self { sde, sdc, weight, params, settings, backend, cache: MetricCache::default() }
    }

    pub fn current_solution(&self) -> Option<&MetricSolution> {
        self.cache.current.as_ref().map(|c| &c.solution)
    }

    fn point(&self, x: &DVector<f64>, x_d: &DVector<f64>, u_d: &DVector<f64>, t: f64) -> Result<PointData, ControlError> {
        let a = self.sdc.combine(x, t).map_err(|e| ControlError::InvalidArgument(e.to_string()))?;
        let factor = |y: &DVector<f64>, tt: f64| self.sdc.combine(y, tt).expect("weights validated");
        let phi = finite_difference_phi(&factor, &*self.sde.input_matrix, x_d, u_d, &(x - x_d), t, None);
        PointData::new(a, (self.sde.input_matrix)(x, t), (self.weight)(x, t), phi).map_err(|e| ControlError::InvalidArgument(e.to_string()))
    }

    fn solve_at(&mut self, point: &PointData, e: &DVector<f64>, u_d_norm: f64, t: f64) -> (Result<MetricSolution, ProgramError>, bool) {
        let rate = self.cache.rate(self.settings.rate_mode, t);
        let assemble = || assemble_general_program(point, &rate, &self.params);
        let limited = self.settings.input_limit.map(|limit| {
            let mut prog = assemble()?;
            add_input_norm_constraint(&mut prog, e, limit.ff_norm(u_d_norm), limit.u_max, &point.b, &point.r)?;
            Ok(prog)
        });
        with_limit_fallback(limited, assemble, self.backend.as_mut())
    }
}

impl Controller for CvstemController {
    fn control(&mut self, t: f64, x: &DVector<f64>, reference: &ReferencePoint) -> Result<ControlOutput, ControlError> {
        let u_d = desired_input(&self.sde, &reference.x_d, &reference.x_d_dot, t, self.settings.reference_tol)?;
        let e = x - &reference.x_d;
        let point = self.point(x, &reference.x_d, &u_d, t)?;
        let mut diagnostics = StepDiagnostics::default();

        let sample_due = t >= self.cache.next_sample - 1e-12;
        let limit_broken = match (&self.settings.input_limit, &self.cache.current) {
            (Some(l), Some(c)) if (l.check_every_step || sample_due) && l.attainable(u_d.norm()) => {
                !l.holds(&c.solution, &point.b, &point.r, &e, u_d.norm())
            }
            _ => false,
        };
        if sample_due || limit_broken || self.cache.current.is_none() {
            if sample_due {
                self.cache.next_sample = t + self.settings.sample_period;
            }
            let (reason, report) = match &self.cache.current {
                None => (Some(ResolveReason::Initial), None),
                Some(c) => {
                    let n = point.n();
                    let report = verify_nonconvex_feasibility(&c.m, c.gamma, &point, &DMatrix::zeros(n, n), &self.params, 0.0);
                    let reason = if limit_broken {
                        Some(ResolveReason::InputLimit)
                    } else {
                        relaxed_resolve_decision(&self.settings.policy, &report, report.objective_bound, c.solution.tau)
                    };
                    (reason, Some(report))
                }
            };
            let mut entry = log_entry(t, reason, report.as_ref());
            if reason.is_some() {
                let (solved, dropped) = self.solve_at(&point, &e, u_d.norm(), t);
                entry.input_limit_dropped = dropped;
                attempt(&mut self.cache, t, solved, &mut entry);
            }
            diagnostics.solve = Some(entry);
        }
        let c = self.cache.current.as_ref().ok_or_else(|| ControlError::NoMetric(format!("no feasible metric at t = {t}")))?;
        let fb = feedback(&c.m, &point.b, &point.r, &e)?;
        diagnostics.weight_extremes = Some(eig_extremes(&c.m));
        diagnostics.feedback_norm = Some(fb.norm());
        diagnostics.lyapunov = Some(e.dot(&(&c.m * &e)));
        let u = match &self.settings.input_limit {
            Some(limit) => {
                let (u, sat) = limit.saturate(&u_d, &fb);
                diagnostics.saturated = sat;
                u
            }
            None => fb + u_d,
        };
        Ok(ControlOutput { u, diagnostics })
    }
}

/// How the stochastic input `u_s` is computed from the metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StochasticLaw {
    /// `u_s = -R^{-1} B^T M s`.
    Feedback,
    /// Min-norm input from the CLF program over the given set.
    MinNormClf { set: InputSet },
}

/// Nominal exponentially stabilizing controller plus metric-based `u_s`.
pub struct LagrangianCvstemController {
    pub system: LagrangianSystem,
    pub gains: LagrangianGains,
    pub weight: MatrixField,
    pub params: LagrangianParams,
    pub settings: ControllerSettings,
    pub law: StochasticLaw,
    backend: Box<dyn SdpBackend>,
    cache: MetricCache,
}

impl LagrangianCvstemController {
    pub fn new(
        system: LagrangianSystem,
        gains: LagrangianGains,
        weight: MatrixField,
        params: LagrangianParams,
        settings: ControllerSettings,
        backend: Box<dyn SdpBackend>,
    ) -> Self {
        Self { system, gains, weight, params, settings, law: StochasticLaw::Feedback, backend, cache: MetricCache::default() }
    }

    pub fn with_law(mut self, law: StochasticLaw) -> Self {
        self.law = law;
        self
    }

    pub fn current_solution(&self) -> Option<&MetricSolution> {
        self.cache.current.as_ref().map(|c| &c.solution)
    }

    fn solve_at(&mut self, point: &LagrangianPoint, s: &DVector<f64>, u_n_norm: f64, t: f64) -> (Result<MetricSolution, ProgramError>, bool) {
        let rate = self.cache.rate(self.settings.rate_mode, t);
        let assemble = || assemble_lagrangian_program(point, &rate, self.settings.rate_convention, &self.params);
        let limited = self.settings.input_limit.map(|limit| {
            let mut prog = assemble()?;
            add_input_norm_constraint(&mut prog, s, limit.ff_norm(u_n_norm), limit.u_max, &point.b, &point.r)?;
            Ok(prog)
        });
        with_limit_fallback(limited, assemble, self.backend.as_mut())
    }
}

impl Controller for LagrangianCvstemController {
    fn control(&mut self, t: f64, x: &DVector<f64>, reference: &ReferencePoint) -> Result<ControlOutput, ControlError> {
        let (q, qd) = self.system.split(x);
        let jr = JointReference::from_point(reference, self.system.dof);
        let nominal = lagrangian_control(&self.system, &self.gains, None, &q, &qd, &jr, t)?;
        let s = &nominal.s;
        let point = LagrangianPoint::new(
            (self.system.inertia)(&q),
            (self.system.coriolis)(&q, &qd),
            (self.gains.k)(t),
            (self.system.actuation)(&q, &qd),
            (self.weight)(x, t),
        )
        .map_err(|e| ControlError::InvalidArgument(e.to_string()))?;
        let mut diagnostics = StepDiagnostics { internal_error_sq: Some(s.norm_squared()), ..Default::default() };

        let sample_due = t >= self.cache.next_sample - 1e-12;
        let limit_broken = match (&self.settings.input_limit, &self.cache.current) {
            (Some(l), Some(c)) if (l.check_every_step || sample_due) && l.attainable(nominal.u_n.norm()) => {
                !l.holds(&c.solution, &point.b, &point.r, s, nominal.u_n.norm())
            }
            _ => false,
        };
        if sample_due || limit_broken || self.cache.current.is_none() {
            if sample_due {
                self.cache.next_sample = t + self.settings.sample_period;
            }
            let (reason, report) = match &self.cache.current {
                None => (Some(ResolveReason::Initial), None),
                Some(c) => {
                    let n = point.n();
                    let report = verify_lagrangian_feasibility(&c.m, c.gamma, &point, &DMatrix::zeros(n, n), &self.params, 0.0);
                    let reason = if limit_broken {
                        Some(ResolveReason::InputLimit)
                    } else {
                        relaxed_resolve_decision(&self.settings.policy, &report, report.objective_bound, c.solution.tau)
                    };
                    (reason, Some(report))
                }
            };
            let mut entry = log_entry(t, reason, report.as_ref());
            if reason.is_some() {
                let (solved, dropped) = self.solve_at(&point, s, nominal.u_n.norm(), t);
                entry.input_limit_dropped = dropped;
                attempt(&mut self.cache, t, solved, &mut entry);
            }
            diagnostics.solve = Some(entry);
        }
        let c = self.cache.current.as_ref().ok_or_else(|| ControlError::NoMetric(format!("no feasible metric at t = {t}")))?;
        let u_s = match &self.law {
            StochasticLaw::Feedback => feedback(&c.m, &point.b, &point.r, s)?,
            StochasticLaw::MinNormClf { set } => {
                let m_dot = self.cache.metric_rate().unwrap_or_else(|| DMatrix::zeros(point.n(), point.n()));
                let cond = clf_condition(&c.m, &m_dot, &point.a, &point.b, &point.b_cal, &point.h, s, &self.params);
                min_norm_clf_control(&cond, set)?.0
            }
        };
        let weight = &point.h + &c.m;
        diagnostics.weight_extremes = Some(eig_extremes(&weight));
        diagnostics.feedback_norm = Some(u_s.norm());
        diagnostics.lyapunov = Some(s.dot(&(weight * s)));
        let u = match &self.settings.input_limit {
            Some(limit) => {
                let (u, sat) = limit.saturate(&nominal.u_n, &u_s);
                diagnostics.saturated = sat;
                u
            }
            None => nominal.u_n + u_s,
        };
        Ok(ControlOutput { u, diagnostics })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_difference_examples() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(backward_difference_w(&p, &p, 0.1), DMatrix::zeros(2, 2));
        let d = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, -2.0, 3.0]);
        assert!((backward_difference_w(&(&p + &d * 0.01), &p, 0.01) - &d).norm() < 1e-12);
        let w = |t: f64| DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 + t, 1.0]));
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!((backward_difference_w(&w(0.3), &w(0.2), 0.1) - expect).norm() < 1e-12);
    }

    #[test]
    fn general_law_examples() {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        let u = general_control(&one(2.0), &one(1.0), &one(1.0), &DVector::from_vec(vec![0.5]), &DVector::zeros(1), &DVector::zeros(1)).unwrap();
        assert!((u[0] + 1.0).abs() < 1e-15);
        let x = DVector::from_vec(vec![0.3, -0.2]);
        let u_d = DVector::from_vec(vec![0.7]);
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert_eq!(general_control(&m, &b, &one(1.0), &x, &x, &u_d).unwrap(), u_d);
    }

    #[test]
    fn unconstrained_clf_zero_state() {
        let cond = ClfCondition { a: 0.0, g: DVector::zeros(2) };
        let (u, d) = min_norm_clf_control(&cond, &InputSet::Unconstrained).unwrap();
        assert_eq!((u.norm(), d), (0.0, 0.0));
    }

    #[test]
    fn empty_input_set_is_rejected() {
        let cond = ClfCondition { a: 1.0, g: DVector::from_vec(vec![1.0]) };
        let set = InputSet::Box { lower: vec![1.0], upper: vec![0.0] };
        assert!(min_norm_clf_control(&cond, &set).is_err());
    }

    #[test]
    fn relaxed_decision_examples() {
        let report = |ric: f64| FeasibilityReport {
            riccati_max_eig: ric,
            contraction_min_eig: 0.0,
            riccati_scale: 1.0,
            contraction_scale: 1.0,
            objective_bound: 1.0,
            passed: true,
        };
        let pol = ResolvePolicy::Relaxed { residual_tol: 1e-6, objective_slack: 0.01 };
        assert_eq!(relaxed_resolve_decision(&pol, &report(0.0), 1.0, 1.0), None);
        assert_eq!(relaxed_resolve_decision(&pol, &report(1e-3), 1.0, 1.0), Some(ResolveReason::Residual));
        assert_eq!(relaxed_resolve_decision(&pol, &report(0.0), 1.05, 1.0), Some(ResolveReason::Objective));
        let strict = ResolvePolicy::Relaxed { residual_tol: 0.0, objective_slack: 0.0 };
        assert_eq!(relaxed_resolve_decision(&strict, &report(0.0), 1.0, 1.0), None);
    }
}
