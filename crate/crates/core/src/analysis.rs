//! Analytic mean-squared bounds and their Monte Carlo checks.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{condition_number, eig_extremes, lambda_min, spd_inverse};
use crate::sim::{EnsembleSeries, TrajectoryRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    /// The noise constants destroy contraction, so the bound has no finite value.
    #[error("bound undefined: {0}")]
    BoundUndefined(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

type Result<T> = std::result::Result<T, AnalysisError>;

fn invalid(msg: impl Into<String>) -> AnalysisError {
    AnalysisError::InvalidArgument(msg.into())
}

/// Constants of the incremental bound between two noisy trajectories.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionConstants {
    pub m_lower: f64,
    pub m_upper: f64,
    pub m_x: f64,
    pub m_xx: f64,
    pub g1: f64,
    pub g2: f64,
    pub gamma_c: f64,
    pub eps: f64,
}

impl ContractionConstants {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.m_lower, self.m_upper, self.m_x, self.m_xx, self.g1, self.g2, self.gamma_c, self.eps];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(invalid("constants must be finite"));
        }
        if !(self.m_lower > 0.0 && self.m_lower <= self.m_upper) {
            return Err(invalid("need 0 < m_lower <= m_upper"));
        }
        if self.m_x < 0.0 || self.m_xx < 0.0 || self.g1 < 0.0 || self.g2 < 0.0 {
            return Err(invalid("derivative and noise bounds must be non-negative"));
        }
        if self.m_x > 0.0 && self.eps <= 0.0 {
            return Err(invalid("eps must be positive when m_x > 0"));
        }
        Ok(())
    }

    pub fn noise_sq(&self) -> f64 {
        self.g1 * self.g1 + self.g2 * self.g2
    }

    /// `gamma_c - (g1^2 + g2^2)/(2 m) (eps m_x + m_xx/2)`.
    pub fn gamma1(&self) -> f64 {
        self.gamma_c - self.noise_sq() / (2.0 * self.m_lower) * (self.eps * self.m_x + self.m_xx / 2.0)
    }

    /// `(m_upper/m + m_x/(eps m)) (g1^2 + g2^2)`.
    pub fn c_c(&self) -> f64 {
        let cross = if self.m_x == 0.0 { 0.0 } else { self.m_x / (self.eps * self.m_lower) };
        (self.m_upper / self.m_lower + cross) * self.noise_sq()
    }

    /// Steady-state value `C_c / (2 gamma1)`.
    pub fn steady_state(&self) -> Result<f64> {
        let g = self.gamma1();
        if g <= 0.0 {
            return Err(AnalysisError::BoundUndefined(format!("gamma1 = {g:.4e} <= 0")));
        }
        Ok(self.c_c() / (2.0 * g))
    }
}

/// `C_c/(2 gamma1) + E[V(0)] e^{-2 gamma1 t} / m`.
pub fn continuous_mse_bound(c: &ContractionConstants, v0: f64, t: f64) -> Result<f64> {
    c.validate()?;
    if v0 < 0.0 || t < 0.0 {
        return Err(invalid("V0 and t must be non-negative"));
    }
    let g = c.gamma1();
    if g <= 0.0 {
        return Err(AnalysisError::BoundUndefined(format!("gamma1 = {g:.4e} <= 0")));
    }
    Ok(c.c_c() / (2.0 * g) + v0 * (-2.0 * g * t).exp() / c.m_lower)
}

/// Constants of the discrete-time incremental bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteConstants {
    pub m_lower: f64,
    pub m_upper: f64,
    pub gamma_d: f64,
    pub gamma2: f64,
    pub g1d: f64,
    pub g2d: f64,
}

impl DiscreteConstants {
    /// Largest admissible `gamma2 = 1 - (m_upper/m)(1 - gamma_d)`.
    pub fn max_gamma2(m_lower: f64, m_upper: f64, gamma_d: f64) -> f64 {
        1.0 - (m_upper / m_lower) * (1.0 - gamma_d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m_lower > 0.0 && self.m_lower <= self.m_upper) {
            return Err(invalid("need 0 < m_lower <= m_upper"));
        }
        if !(self.gamma_d > 0.0 && self.gamma_d < 1.0) {
            return Err(invalid("gamma_d must lie in (0, 1)"));
        }
        if !(self.gamma2 > 0.0 && self.gamma2 < 1.0) {
            return Err(invalid("gamma2 must lie in (0, 1)"));
        }
        let cap = Self::max_gamma2(self.m_lower, self.m_upper, self.gamma_d);
        if self.gamma2 > cap * (1.0 + 1e-12) + 1e-15 {
            return Err(invalid(format!("gamma2 = {} exceeds 1 - (m_upper/m)(1 - gamma_d) = {cap}", self.gamma2)));
        }
        if self.g1d < 0.0 || self.g2d < 0.0 {
            return Err(invalid("noise bounds must be non-negative"));
        }
        Ok(())
    }

    pub fn c_d(&self) -> f64 {
        self.m_upper / self.m_lower * (self.g1d * self.g1d + self.g2d * self.g2d)
    }

    pub fn tilde_gamma_d(&self) -> f64 {
        1.0 - self.gamma2
    }
}

/// `(1 - g^k)/(1 - g) C_d + g^k V0 / m` with `g = 1 - gamma2`.
pub fn discrete_mse_bound(c: &DiscreteConstants, v0: f64, k: u32) -> Result<f64> {
    c.validate()?;
    if v0 < 0.0 {
        return Err(invalid("V0 must be non-negative"));
    }
    let g = c.tilde_gamma_d();
    let gk = g.powi(k as i32);
    Ok((1.0 - gk) / (1.0 - g) * c.c_d() + gk * v0 / c.m_lower)
}

/// Continuous-time rate `gamma2/dt` and offset `C_d/dt`.
pub fn discrete_to_continuous(dt: f64, gamma2: f64, c_d: f64) -> Result<(f64, f64)> {
    if !(dt > 0.0) {
        return Err(invalid("dt must be positive"));
    }
    Ok((gamma2 / dt, c_d / dt))
}

/// Objective `kappa(W) + c kappa(W)^2 lambda_min(W)` together with the
/// quantity it bounds, `lambda_max(M)/lambda_min(M) + c/lambda_min(M)` with `M = W^{-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateObjective {
    pub upper: f64,
    pub metric_form: f64,
}

pub fn steady_state_objective(w: &DMatrix<f64>, c: f64) -> Result<SteadyStateObjective> {
    if !w.is_square() || w.nrows() == 0 {
        return Err(invalid("W must be square and non-empty"));
    }
    let m = spd_inverse(w).ok_or_else(|| invalid("W is not positive definite"))?;
    let kappa = condition_number(w);
    let upper = kappa + c * kappa * kappa * lambda_min(w);
    let (lo, hi) = eig_extremes(&m);
    Ok(SteadyStateObjective { upper, metric_form: hi / lo + c / lo })
}

/// Left side of the composite-state version: `(lambda_max(H+M) + l_x/eps_l) / lambda_min(H+M)`.
pub fn lagrangian_objective_metric_form(h: &DMatrix<f64>, m: &DMatrix<f64>, lx_over_eps: f64) -> f64 {
    let (lo, hi) = eig_extremes(&(h + m));
    (hi + lx_over_eps) / lo
}

/// Result of the noise-weight search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonChoice {
    pub eps: f64,
    pub value: f64,
    /// The objective does not depend on eps (`m_x = 0`); the bracket infimum is returned.
    pub degenerate: bool,
}

/// Minimizes `F(eps) = C_c(eps) / (2 gamma1(eps))` over `eps > 0` with `gamma1 > 0`.
/// `bracket` narrows the search; the default is `(0, eps_max)`.
pub fn optimal_epsilon(c: &ContractionConstants, bracket: Option<(f64, f64)>) -> Result<EpsilonChoice> {
    let mut probe = *c;
    probe.eps = 1.0;
    probe.validate()?;
    let noise = c.noise_sq();
    let f = |eps: f64| {
        let mut k = *c;
        k.eps = eps;
        let g = k.gamma1();
        if g > 0.0 { k.c_c() / (2.0 * g) } else { f64::INFINITY }
    };
    let (mut lo, mut hi) = bracket.unwrap_or((0.0, f64::INFINITY));
    if !(lo >= 0.0 && lo < hi) {
        return Err(invalid("bracket must satisfy 0 <= lo < hi"));
    }
    if c.m_x == 0.0 || noise == 0.0 {
        let mut k = *c;
        k.eps = lo;
        if k.gamma1() <= 0.0 {
            return Err(AnalysisError::BoundUndefined("gamma1 <= 0 for every eps".into()));
        }
        let value = k.c_c() / (2.0 * k.gamma1());
        return Ok(EpsilonChoice { eps: lo, value, degenerate: true });
    }
    // gamma1(eps) > 0  <=>  eps < eps_max
    let eps_max = (2.0 * c.m_lower * c.gamma_c / noise - c.m_xx / 2.0) / c.m_x;
    if eps_max <= 0.0 {
        return Err(AnalysisError::BoundUndefined("gamma1 <= 0 for every eps > 0".into()));
    }
    hi = hi.min(eps_max);
    if lo >= hi {
        return Err(AnalysisError::BoundUndefined("gamma1 <= 0 on the whole bracket".into()));
    }
    // dF/deps has the sign of C_c' gamma1 - C_c gamma1'.
    let a = c.m_upper / c.m_lower * noise;
    let b = c.m_x / c.m_lower * noise;
    let dg = -noise * c.m_x / (2.0 * c.m_lower);
    let slope = |eps: f64| {
        let cc = a + b / eps;
        let dcc = -b / (eps * eps);
        let mut k = *c;
        k.eps = eps;
        dcc * k.gamma1() - cc * dg
    };
    let span = hi - lo;
    let (mut a_e, mut b_e) = (lo + 1e-12 * span.max(1e-300), hi - 1e-12 * span);
    if lo == 0.0 {
        a_e = 1e-12 * hi;
    }
    if a_e < b_e && slope(a_e) < 0.0 && slope(b_e) > 0.0 {
        for _ in 0..200 {
            let mid = 0.5 * (a_e + b_e);
            if slope(mid) < 0.0 { a_e = mid } else { b_e = mid }
            if b_e - a_e <= 1e-14 * b_e {
                break;
            }
        }
        let eps = 0.5 * (a_e + b_e);
        return Ok(EpsilonChoice { eps, value: f(eps), degenerate: false });
    }
    // Fallback: golden-section on F inside the bracket.
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    lo = a_e;
    hi = b_e;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..300 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    let eps = 0.5 * (lo + hi);
    let value = f(eps);
    if !value.is_finite() {
        return Err(AnalysisError::BoundUndefined("no eps in the bracket keeps gamma1 > 0".into()));
    }
    Ok(EpsilonChoice { eps, value, degenerate: false })
}

/// Constants of the tracking bound for the feedback `-R^{-1} B^T M e`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingConstants {
    pub alpha: f64,
    pub m_lower: f64,
    pub m_upper: f64,
    pub m_x: f64,
    pub m_xx: f64,
    pub g_u: f64,
    pub eps: f64,
}

impl TrackingConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(invalid("alpha must be positive"));
        }
        if !(self.m_lower > 0.0 && self.m_lower <= self.m_upper) {
            return Err(invalid("need 0 < m_lower <= m_upper"));
        }
        if self.m_x < 0.0 || self.m_xx < 0.0 || self.g_u < 0.0 {
            return Err(invalid("bounds must be non-negative"));
        }
        if self.m_x > 0.0 && !(self.eps > 0.0) {
            return Err(invalid("eps must be positive when m_x > 0"));
        }
        Ok(())
    }

    /// `(m_upper/m) g_u^2 + m_x g_u^2 / (eps m)`.
    pub fn offset(&self) -> f64 {
        let g2 = self.g_u * self.g_u;
        let cross = if self.m_x == 0.0 { 0.0 } else { self.m_x * g2 / (self.eps * self.m_lower) };
        self.m_upper / self.m_lower * g2 + cross
    }

    /// `2 alpha_g = g_u^2 (m_x eps + m_xx / 2)`.
    pub fn two_alpha_g(&self) -> f64 {
        self.g_u * self.g_u * (self.m_x * self.eps + self.m_xx / 2.0)
    }
}

/// `C/(2 alpha) + E[V(0)] e^{-2 alpha t} / m`.
pub fn tracking_mse_bound(c: &TrackingConstants, v0: f64, t: f64) -> Result<f64> {
    c.validate()?;
    if v0 < 0.0 || t < 0.0 {
        return Err(invalid("V0 and t must be non-negative"));
    }
    Ok(c.offset() / (2.0 * c.alpha) + v0 * (-2.0 * c.alpha * t).exp() / c.m_lower)
}

/// Inputs of the composite-state bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianBoundInputs {
    pub alpha_ell: f64,
    pub k_lower: f64,
    pub g_b: f64,
    pub l_x: f64,
    pub eps_ell: f64,
    /// `sup_t lambda_max(H + M)` over the run.
    pub sup_lambda_max: f64,
    /// `inf_t lambda_min(H + M)` over the run.
    pub inf_lambda_min: f64,
}

impl LagrangianBoundInputs {
    pub fn c_ell(&self) -> f64 {
        let g2 = self.g_b * self.g_b;
        let cross = if self.l_x == 0.0 { 0.0 } else { self.l_x * g2 / self.eps_ell };
        g2 * self.sup_lambda_max + cross
    }

    pub fn alpha_bar(&self) -> f64 {
        self.alpha_ell + self.k_lower / self.sup_lambda_max
    }
}

/// `(V0 e^{-2 abar t} + C_l/(2 abar)) / inf lambda_min(H + M)`.
pub fn lagrangian_mse_bound(p: &LagrangianBoundInputs, v0: f64, t: f64) -> Result<f64> {
    if !(p.sup_lambda_max > 0.0 && p.inf_lambda_min > 0.0 && p.inf_lambda_min <= p.sup_lambda_max) {
        return Err(invalid("need 0 < inf lambda_min <= sup lambda_max"));
    }
    if p.l_x > 0.0 && !(p.eps_ell > 0.0) {
        return Err(invalid("eps_ell must be positive when l_x > 0"));
    }
    if p.g_b < 0.0 || p.l_x < 0.0 || p.k_lower < 0.0 || v0 < 0.0 || t < 0.0 {
        return Err(invalid("constants must be non-negative"));
    }
    let abar = p.alpha_bar();
    if !(abar > 0.0) {
        return Err(invalid("alpha_bar must be positive"));
    }
    Ok((v0 * (-2.0 * abar * t).exp() + p.c_ell() / (2.0 * abar)) / p.inf_lambda_min)
}

/// Extreme eigenvalues of the logged weight over a set of runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunExtremes {
    pub lower: f64,
    pub upper: f64,
}

impl RunExtremes {
    pub fn from_records(records: &[TrajectoryRecord]) -> Result<Self> {
        let mut lower = f64::INFINITY;
        let mut upper = f64::NEG_INFINITY;
        for d in records.iter().flat_map(|r| &r.diagnostics) {
            if let Some((lo, hi)) = d.weight_extremes {
                lower = lower.min(lo);
                upper = upper.max(hi);
            }
        }
        if !(lower.is_finite() && upper.is_finite() && lower > 0.0) {
            return Err(invalid("records carry no positive weight eigenvalues"));
        }
        Ok(Self { lower, upper })
    }
}

/// Outcome of comparing an ensemble curve against an analytic bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub constants: serde_json::Value,
    pub times: Vec<f64>,
    pub bound: Vec<f64>,
    pub empirical: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Fraction of points where the sample mean exceeds the bound.
    pub violation_fraction: f64,
    /// Fraction of points where even `mean - z * std_err` exceeds the bound.
    pub hard_violation_fraction: f64,
    pub z: f64,
    pub max_violation_fraction: f64,
    pub passed: bool,
}

impl BoundReport {
    /// Passes when at most `max_violation_fraction` of the points exceed the bound
    /// and every such point is within `z` standard errors of it.
    pub fn compare(
        name: &str,
        constants: serde_json::Value,
        series: &EnsembleSeries,
        bound: Vec<f64>,
        z: f64,
        max_violation_fraction: f64,
    ) -> Result<Self> {
        let len = series.mean.len();
        if bound.len() != len || len == 0 {
            return Err(invalid("bound and empirical curves differ in length"));
        }
        let mut soft = 0usize;
        let mut hard = 0usize;
        for k in 0..len {
            if series.mean[k] > bound[k] {
                soft += 1;
                if series.mean[k] - z * series.std_err[k] > bound[k] {
                    hard += 1;
                }
            }
        }
        let violation_fraction = soft as f64 / len as f64;
        let hard_violation_fraction = hard as f64 / len as f64;
        Ok(Self {
            name: name.to_string(),
            constants,
            times: series.times.clone(),
            bound,
            empirical: series.mean.clone(),
            std_err: series.std_err.clone(),
            violation_fraction,
            hard_violation_fraction,
            z,
            max_violation_fraction,
            passed: hard == 0 && violation_fraction <= max_violation_fraction,
        })
    }
}

/// Outcome of the finite-horizon L2 check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2GainReport {
    pub tau: f64,
    pub alpha1: f64,
    /// Ensemble mean of `int_0^tau ||e||^2`.
    pub lhs: f64,
    pub lhs_std_err: f64,
    pub rhs: f64,
    pub mean_initial_energy: f64,
    pub mean_disturbance_energy: f64,
    pub passed: bool,
}

/// Constants of the L2 check; `c_m` is the noise offset scaled by `m_lower`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2GainConstants {
    pub alpha: f64,
    pub m_lower: f64,
    pub m_upper: f64,
    pub c_m: f64,
    pub eps1: f64,
}

impl L2GainConstants {
    pub fn alpha1(&self) -> f64 {
        self.alpha * self.m_lower - self.eps1 * self.m_upper / 2.0
    }
}

/// Checks `E int ||e||^2 <= (E V(0) + (m_upper/eps1) E int ||d||^2 + C_m tau) / (2 alpha1)`
/// with left-endpoint quadrature on the recorded grid. `V(0)` is read from the
/// first step's logged Lyapunov value.
pub fn l2_gain_check(records: &[TrajectoryRecord], c: &L2GainConstants, z: f64) -> Result<L2GainReport> {
    if !(c.eps1 > 0.0) {
        return Err(invalid("eps1 must be positive"));
    }
    let alpha1 = c.alpha1();
    if !(alpha1 > 0.0) {
        return Err(invalid(format!("alpha1 = {alpha1:.4e} must be positive")));
    }
    if records.len() < 2 {
        return Err(invalid("at least two runs are required"));
    }
    let mut lhs = Vec::with_capacity(records.len());
    let mut v0 = 0.0;
    let mut dist = 0.0;
    let mut tau: Option<f64> = None;
    for r in records {
        if r.len() < 2 {
            return Err(invalid("records need at least two samples"));
        }
        let steps = r.len() - 1;
        let t_end = r.times[steps];
        if let Some(t) = tau {
            if (t - t_end).abs() > 1e-9 * (1.0 + t) {
                return Err(invalid("records have different horizons"));
            }
        }
        tau = Some(t_end);
        let energy = |s: &[f64]| (0..steps).map(|k| s[k] * (r.times[k + 1] - r.times[k])).sum::<f64>();
        lhs.push(energy(&r.error_sq));
        dist += energy(&r.disturbance_sq);
        v0 += r.diagnostics[0]
            .lyapunov
            .ok_or_else(|| invalid("first step carries no Lyapunov value"))?;
    }
    let n = records.len() as f64;
    let tau = tau.unwrap_or(0.0);
    let mean = lhs.iter().sum::<f64>() / n;
    let var = lhs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let v0 = v0 / n;
    let dist = dist / n;
    let rhs = (v0 + c.m_upper / c.eps1 * dist + c.c_m * tau) / (2.0 * alpha1);
    Ok(L2GainReport {
        tau,
        alpha1,
        lhs: mean,
        lhs_std_err: se,
        rhs,
        mean_initial_energy: v0,
        mean_disturbance_energy: dist,
        passed: mean - z * se <= rhs,
    })
}

/// `int_0^1 (x1 - x2)^T M(x2 + mu (x1 - x2)) (x1 - x2) dmu` by composite Simpson.
pub fn straight_line_energy(metric: &dyn Fn(&DVector<f64>) -> DMatrix<f64>, x1: &DVector<f64>, x2: &DVector<f64>, intervals: usize) -> f64 {
    let n = intervals.max(2) + intervals % 2;
    let d = x1 - x2;
    let h = 1.0 / n as f64;
    (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            let x = x2 + &d * (i as f64 * h);
            w * d.dot(&(metric(&x) * &d))
        })
        .sum::<f64>()
        * h
        / 3.0
}

/// Two independent scalar diffusions `d xi_i = f(xi_i) dt + g_i dW_i` and a
/// function `V(xi_1, xi_2)` with its generator.
pub struct ScalarPair<'a> {
    pub drift: &'a (dyn Fn(f64) -> f64 + Sync),
    pub g1: f64,
    pub g2: f64,
    pub v: &'a (dyn Fn(f64, f64) -> f64 + Sync),
    pub generator: &'a (dyn Fn(f64, f64) -> f64 + Sync),
}

/// `E[V_{k+1} | xi] - (V_k + dt LV_k)` for one Euler-Maruyama step, estimated
/// with `inner` antithetic pairs.
pub fn one_step_generator_gap(sys: &ScalarPair<'_>, xi: (f64, f64), dt: f64, inner: usize, seed: u64) -> Result<f64> {
    if !(dt > 0.0) || inner == 0 {
        return Err(invalid("dt and inner sample count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = xi;
    let ma = a + (sys.drift)(a) * dt;
    let mb = b + (sys.drift)(b) * dt;
    let (s1, s2) = (sys.g1 * dt.sqrt(), sys.g2 * dt.sqrt());
    let mut acc = 0.0;
    for _ in 0..inner {
        let w1: f64 = StandardNormal.sample(&mut rng);
        let w2: f64 = StandardNormal.sample(&mut rng);
        acc += (sys.v)(ma + s1 * w1, mb + s2 * w2)
            + (sys.v)(ma - s1 * w1, mb - s2 * w2)
            + (sys.v)(ma + s1 * w1, mb - s2 * w2)
            + (sys.v)(ma - s1 * w1, mb + s2 * w2);
    }
    let expect = acc / (4.0 * inner as f64);
    Ok(expect - ((sys.v)(a, b) + dt * (sys.generator)(a, b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ContractionConstants {
        ContractionConstants { m_lower: 1.0, m_upper: 1.0, m_x: 1.0, m_xx: 0.0, g1: 1.0, g2: 0.0, gamma_c: 1.0, eps: 0.5 }
    }

    #[test]
    fn derived_constants() {
        let c = ContractionConstants { m_lower: 2.0, m_upper: 4.0, m_x: 1.0, m_xx: 2.0, g1: 1.0, g2: 2.0, gamma_c: 3.0, eps: 0.5 };
        assert!((c.gamma1() - (3.0 - 5.0 / 4.0 * (0.5 + 1.0))).abs() < 1e-15);
        assert!((c.c_c() - (2.0 + 1.0) * 5.0).abs() < 1e-15);
    }

    #[test]
    fn noiseless_bound_is_pure_decay() {
        let mut c = toy();
        c.g1 = 0.0;
        let b = continuous_mse_bound(&c, 3.0, 0.7).unwrap();
        assert!((b - 3.0 * (-2.0 * 0.7f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn large_time_limit() {
        let c = toy();
        let b = continuous_mse_bound(&c, 5.0, 1e3).unwrap();
        assert!((b - c.c_c() / (2.0 * c.gamma1())).abs() < 1e-12);
    }

    #[test]
    fn noise_can_make_the_bound_undefined() {
        let mut c = toy();
        c.g1 = 3.0;
        c.eps = 1.0;
        assert!(matches!(continuous_mse_bound(&c, 1.0, 0.0), Err(AnalysisError::BoundUndefined(_))));
    }

    #[test]
    fn discrete_endpoints() {
        let c = DiscreteConstants { m_lower: 1.0, m_upper: 2.0, gamma_d: 0.9, gamma2: 0.5, g1d: 0.3, g2d: 0.4 };
        assert!((discrete_mse_bound(&c, 7.0, 0).unwrap() - 7.0).abs() < 1e-15);
        let far = discrete_mse_bound(&c, 7.0, 2000).unwrap();
        assert!((far - c.c_d() / c.gamma2).abs() < 1e-12);
    }

    #[test]
    fn discrete_constants_reject_inconsistent_rate() {
        let c = DiscreteConstants { m_lower: 1.0, m_upper: 2.0, gamma_d: 0.5, gamma2: 0.5, g1d: 0.0, g2d: 0.0 };
        assert!(discrete_mse_bound(&c, 1.0, 1).is_err());
        let bad = DiscreteConstants { gamma2: 1.5, ..c };
        assert!(discrete_mse_bound(&bad, 1.0, 1).is_err());
    }

    #[test]
    fn discrete_to_continuous_rate() {
        let (rate, _) = discrete_to_continuous(0.1, 0.02, 1.0).unwrap();
        assert!((rate - 0.2).abs() < 1e-15);
        let g = 0.7f64;
        for dt in [0.1f64, 0.01, 0.001] {
            let d = DiscreteConstants { m_lower: 1.0, m_upper: 1.5, gamma_d: 0.5, gamma2: 0.1, g1d: dt.sqrt() * g, g2d: dt.sqrt() * g };
            let (_, c) = discrete_to_continuous(dt, d.gamma2, d.c_d()).unwrap();
            assert!((c - 1.5 * 2.0 * g * g).abs() < 1e-12);
        }
        assert!(discrete_to_continuous(0.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn steady_state_objective_examples() {
        let i = DMatrix::<f64>::identity(2, 2);
        assert!((steady_state_objective(&i, 0.0).unwrap().upper - 1.0).abs() < 1e-12);
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        assert!((steady_state_objective(&w, 0.0).unwrap().upper - 4.0).abs() < 1e-12);
        assert!(steady_state_objective(&(-i), 0.0).is_err());
    }

    #[test]
    fn epsilon_degenerate_case() {
        let mut c = toy();
        c.m_x = 0.0;
        let e = optimal_epsilon(&c, Some((0.25, 3.0))).unwrap();
        assert!(e.degenerate);
        assert_eq!(e.eps, 0.25);
    }

    #[test]
    fn epsilon_toy_closed_form() {
        // F = (1 + 1/eps)/(2 - eps), stationary at eps^2 + 2 eps - 2 = 0.
        let e = optimal_epsilon(&toy(), None).unwrap();
        assert!((e.eps - (3f64.sqrt() - 1.0)).abs() < 1e-9, "{}", e.eps);
        assert!(!e.degenerate);
    }

    #[test]
    fn tracking_offset_recomputes() {
        let c = TrackingConstants { alpha: 0.5, m_lower: 2.0, m_upper: 3.0, m_x: 0.4, m_xx: 0.6, g_u: 1.5, eps: 0.2 };
        assert!((c.offset() - (1.5 * 2.25 + 0.4 * 2.25 / 0.4)).abs() < 1e-14);
        assert!((c.two_alpha_g() - 2.25 * (0.08 + 0.3)).abs() < 1e-14);
    }

    #[test]
    fn lagrangian_bound_without_noise_decays() {
        let p = LagrangianBoundInputs { alpha_ell: 0.5, k_lower: 1.0, g_b: 0.0, l_x: 0.0, eps_ell: 1.0, sup_lambda_max: 2.0, inf_lambda_min: 1.0 };
        let b = lagrangian_mse_bound(&p, 4.0, 1.0).unwrap();
        assert!((b - 4.0 * (-2.0f64).exp()).abs() < 1e-14);
        let q = LagrangianBoundInputs { g_b: 0.5, l_x: 0.2, eps_ell: 0.5, ..p };
        let far = lagrangian_mse_bound(&q, 4.0, 1e3).unwrap();
        assert!((far - q.c_ell() / (2.0 * q.alpha_bar())).abs() < 1e-12);
        let bad = LagrangianBoundInputs { inf_lambda_min: 0.0, ..p };
        assert!(lagrangian_mse_bound(&bad, 1.0, 0.0).is_err());
    }

    #[test]
    fn straight_line_energy_constant_metric() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let x1 = DVector::from_vec(vec![1.0, -1.0]);
        let x2 = DVector::from_vec(vec![0.5, 0.5]);
        let d = &x1 - &x2;
        let v = straight_line_energy(&|_| m.clone(), &x1, &x2, 4);
        assert!((v - d.dot(&(&m * &d))).abs() < 1e-12);
    }
}
