//! Per-point convex programs whose solutions are contraction metrics.
//!
//! All programs share the scaled variables `W~ = nu * M^{-1}`, `nu`,
//! `gamma~ = nu * gamma`, `chi` and (when the objective has a quadratic
//! term) `tau`. The metric is recovered as `M = nu * W~^{-1}`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{condition_number, eig_extremes, lambda_max, lambda_min, spd_inverse, spectral_norm, sym};
use crate::sdp::{AffineMatrix, ScalarVar, SdpBackend, SdpError, SdpProblem, SdpStatus, SymVar};

pub const TAG_BOUNDS: &str = "metric-bounds";
pub const TAG_RICCATI: &str = "riccati";
pub const TAG_CONTRACTION: &str = "contraction";
pub const TAG_EPIGRAPH: &str = "epigraph";
/// Sign and cap constraints on the scalar variables.
pub const TAG_DOMAIN: &str = "domain";
pub const TAG_INPUT: &str = "input-norm";
pub const TAG_SDC_COUPLING: &str = "sdc-coupling";
pub const TAG_SDC_WEIGHTS: &str = "sdc-weights";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProgramError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("solver error: {0}")]
    Solver(#[from] SdpError),
}

/// Constants of the stochastic contraction condition for a general SDC system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvstemParams {
    pub alpha: f64,
    pub alpha_g: f64,
    pub c1: f64,
    /// The free constant used to derive `alpha_g` and `c1`, when known.
    pub eps: Option<f64>,
    /// Upper bound on `nu`, i.e. on the largest eigenvalue of the metric.
    /// The objective keeps decreasing as `nu` grows, so without a cap the
    /// optimum is not attained.
    pub nu_max: f64,
    /// Lower bound on `gamma~`.
    pub gamma_tilde_min: f64,
}

impl CvstemParams {
    pub fn new(alpha: f64, alpha_g: f64, c1: f64) -> Result<Self, ProgramError> {
        let p = Self { alpha, alpha_g, c1, eps: None, nu_max: 1e6, gamma_tilde_min: 0.0 };
        p.validate()?;
        Ok(p)
    }

    /// `2 alpha_g = g_u^2 (m_x eps + m_x2 / 2)` and `c1 = m_x / eps`.
    pub fn from_bounds(alpha: f64, eps: f64, m_x: f64, m_x2: f64, g_u: f64) -> Result<Self, ProgramError> {
        if !(eps > 0.0) || m_x < 0.0 || m_x2 < 0.0 || g_u < 0.0 {
            return Err(ProgramError::InvalidArgument("eps must be positive and bounds non-negative".into()));
        }
        let mut p = Self::new(alpha, 0.5 * g_u * g_u * (m_x * eps + 0.5 * m_x2), m_x / eps)?;
        p.eps = Some(eps);
        Ok(p)
    }

    pub fn with_nu_max(mut self, nu_max: f64) -> Self {
        self.nu_max = nu_max;
        self
    }

    pub fn validate(&self) -> Result<(), ProgramError> {
        if !(self.alpha > 0.0) || !(self.alpha_g >= 0.0) || !(self.c1 >= 0.0) || !(self.nu_max > 0.0) || self.gamma_tilde_min < 0.0 {
            return Err(ProgramError::InvalidArgument(format!(
                "need alpha > 0, alpha_g >= 0, c1 >= 0, nu_max > 0 (got {}, {}, {}, {})",
                self.alpha, self.alpha_g, self.c1, self.nu_max
            )));
        }
        Ok(())
    }
}

/// Constants of the stochastic contraction condition for Lagrangian systems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianParams {
    pub alpha_ell: f64,
    pub alpha_gamma: f64,
    /// `l_x / eps_l`; added to `lambda_max(H)` to form the objective constant.
    pub c2_offset: f64,
    /// Fixed objective constant, overriding `lambda_max(H) + c2_offset`.
    pub c2_override: Option<f64>,
    pub eps_ell: Option<f64>,
    /// Weight of the metric in the composite Lyapunov function. Always 1.
    pub sigma: f64,
    /// `k` with `k I < K(t)` for the nominal damping gain.
    pub k_lower: f64,
    pub nu_max: f64,
    pub gamma_tilde_min: f64,
}

impl LagrangianParams {
    pub fn new(alpha_ell: f64, alpha_gamma: f64, c2: f64) -> Result<Self, ProgramError> {
        let p = Self {
            alpha_ell,
            alpha_gamma,
            c2_offset: 0.0,
            c2_override: Some(c2),
            eps_ell: None,
            sigma: 1.0,
            k_lower: 0.0,
            nu_max: 1e6,
            gamma_tilde_min: 0.0,
        };
        p.validate()?;
        Ok(p)
    }

    /// `2 alpha_gamma = g_B^2 (l_x eps_l + l_x2 / 2)`; `c2 = lambda_max(H) + l_x / eps_l`.
    pub fn from_bounds(alpha_ell: f64, eps_ell: f64, l_x: f64, l_x2: f64, g_b: f64, k_lower: f64) -> Result<Self, ProgramError> {
        if !(eps_ell > 0.0) || l_x < 0.0 || l_x2 < 0.0 || g_b < 0.0 {
            return Err(ProgramError::InvalidArgument("eps_ell must be positive and bounds non-negative".into()));
        }
        let p = Self {
            alpha_ell,
            alpha_gamma: 0.5 * g_b * g_b * (l_x * eps_ell + 0.5 * l_x2),
            c2_offset: l_x / eps_ell,
            c2_override: None,
            eps_ell: Some(eps_ell),
            sigma: 1.0,
            k_lower,
            nu_max: 1e6,
            gamma_tilde_min: 0.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_nu_max(mut self, nu_max: f64) -> Self {
        self.nu_max = nu_max;
        self
    }

    pub fn c2(&self, h: &DMatrix<f64>) -> f64 {
        self.c2_override.unwrap_or_else(|| lambda_max(h) + self.c2_offset)
    }

    pub fn validate(&self) -> Result<(), ProgramError> {
        if self.sigma != 1.0 {
            return Err(ProgramError::InvalidArgument("sigma is fixed to 1".into()));
        }
        if !(self.alpha_ell > 0.0) || !(self.alpha_gamma >= 0.0) || !(self.nu_max > 0.0) || self.c2_offset < 0.0 || self.k_lower < 0.0 {
            return Err(ProgramError::InvalidArgument("need alpha_ell > 0, alpha_gamma >= 0, nu_max > 0".into()));
        }
        if let Some(c2) = self.c2_override {
            if !(c2 >= 0.0) {
                return Err(ProgramError::InvalidArgument("c2 must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// How the time derivative of `W~` enters the program.
#[derive(Clone, Debug, PartialEq)]
pub enum MetricRate {
    Zero,
    Fixed(DMatrix<f64>),
    /// `(W~ - previous) / dt` with the current `W~` as decision variable.
    BackwardDifference { previous: DMatrix<f64>, dt: f64 },
}

impl MetricRate {
    fn expr(&self, w: &SymVar) -> AffineMatrix {
        let n = w.dim;
        match self {
            MetricRate::Zero => AffineMatrix::zeros(n, n),
            MetricRate::Fixed(m) => AffineMatrix::constant(sym(m)),
            MetricRate::BackwardDifference { previous, dt } => w.expr().scaled(1.0 / dt).plus_constant(&(-sym(previous) / *dt)),
        }
    }

    fn check(&self, n: usize) -> Result<(), ProgramError> {
        let m = match self {
            MetricRate::Zero => return Ok(()),
            MetricRate::Fixed(m) => m,
            MetricRate::BackwardDifference { previous, dt } => {
                if !(*dt > 0.0) {
                    return Err(ProgramError::InvalidArgument("backward-difference step must be positive".into()));
                }
                previous
            }
        };
        if m.shape() != (n, n) {
            return Err(ProgramError::InvalidArgument("metric rate has the wrong shape".into()));
        }
        Ok(())
    }
}

/// Sign of the `dW~/dt` term in the Lagrangian Riccati constraint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateConvention {
    /// `+dW~/dt` in the Lagrangian program, `-dW~/dt` in the general one.
    #[default]
    AsPrinted,
    /// `-dW~/dt` in both, matching the congruence transform of `dM/dt`.
    Congruent,
}

/// Matrices of the general program at one point.
#[derive(Clone, Debug)]
pub struct PointData {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Jacobian of the SDC deviation with respect to the error state.
    pub phi: DMatrix<f64>,
}

impl PointData {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, r: DMatrix<f64>, phi: DMatrix<f64>) -> Result<Self, ProgramError> {
        let n = a.nrows();
        let m = b.ncols();
        if a.ncols() != n || b.nrows() != n || r.shape() != (m, m) || phi.shape() != (n, n) {
            return Err(ProgramError::InvalidArgument("inconsistent point dimensions".into()));
        }
        check_weight(&r)?;
        Ok(Self { a, b, r, phi })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// `B R^{-1} B^T`.
    pub fn brb(&self) -> DMatrix<f64> {
        let rinv = spd_inverse(&self.r).expect("checked at construction");
        sym(&(&self.b * rinv * self.b.transpose()))
    }
}

fn check_weight(r: &DMatrix<f64>) -> Result<(), ProgramError> {
    if !r.is_square() || (r - r.transpose()).norm() > 1e-10 * (1.0 + r.norm()) || spd_inverse(r).is_none() {
        return Err(ProgramError::InvalidArgument("input weight R is not symmetric positive definite".into()));
    }
    Ok(())
}

/// Matrices of the Lagrangian program at one point.
#[derive(Clone, Debug)]
pub struct LagrangianPoint {
    pub h: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Nominal damping gain `K(t)`.
    pub k: DMatrix<f64>,
    /// Actuation matrix of the mechanical system.
    pub b_cal: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// `-H^{-1}(C + K)`.
    pub a: DMatrix<f64>,
    /// `H^{-1} b_cal`.
    pub b: DMatrix<f64>,
}

impl LagrangianPoint {
    pub fn new(h: DMatrix<f64>, c: DMatrix<f64>, k: DMatrix<f64>, b_cal: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self, ProgramError> {
        let n = h.nrows();
        let m = b_cal.ncols();
        if !h.is_square() || c.shape() != (n, n) || k.shape() != (n, n) || b_cal.nrows() != n || r.shape() != (m, m) {
            return Err(ProgramError::InvalidArgument("inconsistent Lagrangian dimensions".into()));
        }
        check_weight(&r)?;
        let hinv = spd_inverse(&sym(&h)).ok_or_else(|| ProgramError::InvalidArgument("inertia matrix is singular or indefinite".into()))?;
        let a = -&hinv * (&c + &k);
        let b = &hinv * &b_cal;
        Ok(Self { h, c, k, b_cal, r, a, b })
    }

    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    pub fn brb(&self) -> DMatrix<f64> {
        let rinv = spd_inverse(&self.r).expect("checked at construction");
        sym(&(&self.b * rinv * self.b.transpose()))
    }

    /// `b_cal R^{-1} B^T`.
    pub fn cross(&self) -> DMatrix<f64> {
        let rinv = spd_inverse(&self.r).expect("checked at construction");
        &self.b_cal * rinv * self.b.transpose()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgramKind {
    General,
    Lagrangian,
    RelaxedSdc,
}

/// Variable handles of an assembled program.
#[derive(Clone, Debug)]
pub struct ProgramVars {
    pub w_tilde: SymVar,
    pub nu: ScalarVar,
    pub gamma_tilde: ScalarVar,
    pub chi: ScalarVar,
    /// Absent when the quadratic objective term vanishes and `chi` is minimized.
    pub tau: Option<ScalarVar>,
    /// Lower eigenvalue bound of `W~` used by the input-norm constraint.
    pub ell: Option<ScalarVar>,
    /// `(W~_i, rho~_i)` of the relaxed SDC program.
    pub sdc: Vec<(SymVar, ScalarVar)>,
}

#[derive(Clone, Debug)]
pub struct CvstemProgram {
    pub kind: ProgramKind,
    pub problem: SdpProblem,
    pub vars: ProgramVars,
    /// Objective constant (`c1` or `c2`).
    pub c: f64,
}

fn scalar_ge(problem: &mut SdpProblem, tag: &str, expr: AffineMatrix) -> Result<(), ProgramError> {
    problem.add_psd(tag, expr)?;
    Ok(())
}

fn one(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// Shared variables, bounds `I <= W~ <= chi I`, domain constraints and objective.
fn base_program(n: usize, c: f64, nu_max: f64, gamma_tilde_min: f64) -> Result<(SdpProblem, ProgramVars), ProgramError> {
    let mut p = SdpProblem::new();
    let w_tilde = p.add_symmetric("W_tilde", n);
    let nu = p.add_scalar("nu");
    let gamma_tilde = p.add_scalar("gamma_tilde");
    let chi = p.add_scalar("chi");
    let tau = if c > 0.0 { Some(p.add_scalar("tau")) } else { None };
    let id = DMatrix::identity(n, n);

    p.add_psd(TAG_BOUNDS, w_tilde.expr().plus_constant(&-id.clone()))?;
    p.add_psd(TAG_BOUNDS, chi.times(id).minus(&w_tilde.expr()))?;

    scalar_ge(&mut p, TAG_DOMAIN, nu.expr())?;
    scalar_ge(&mut p, TAG_DOMAIN, nu.expr().scaled(-1.0).plus_constant(&one(nu_max)))?;
    scalar_ge(&mut p, TAG_DOMAIN, gamma_tilde.expr().plus_constant(&one(-gamma_tilde_min)))?;

    match tau {
        Some(t) => {
            // [[tau - chi, chi], [chi, nu / c]] >= 0
            let top_left = t.expr().minus(&chi.expr());
            let epi = AffineMatrix::blocks(&[vec![top_left, chi.expr()], vec![chi.expr(), nu.expr().scaled(1.0 / c)]]);
            p.add_psd(TAG_EPIGRAPH, epi)?;
            p.set_objective(vec![(t.0, 1.0)]);
        }
        None => p.set_objective(vec![(chi.0, 1.0)]),
    }
    let vars = ProgramVars { w_tilde, nu, gamma_tilde, chi, tau, ell: None, sdc: Vec::new() };
    Ok((p, vars))
}

/// `-dW~ + A W~ + W~ A^T + gamma~ I - nu B R^{-1} B^T <= 0` with `A W~` given as an expression.
fn riccati_block(aw: &AffineMatrix, rate: &AffineMatrix, rate_sign: f64, brb: &DMatrix<f64>, v: &ProgramVars) -> AffineMatrix {
    let n = brb.nrows();
    let lhs = aw
        .sym_sum()
        .plus(&rate.scaled(rate_sign))
        .plus(&v.gamma_tilde.times(DMatrix::identity(n, n)))
        .minus(&v.nu.times(brb.clone()));
    lhs.scaled(-1.0)
}

/// Contraction block with a given `(1,1)` part.
fn contraction_block(top_left: AffineMatrix, v: &ProgramVars, bottom_right: Option<AffineMatrix>) -> AffineMatrix {
    match bottom_right {
        Some(br) => {
            let w = v.w_tilde.expr();
            AffineMatrix::blocks(&[vec![top_left, w.clone()], vec![w, br]])
        }
        None => top_left,
    }
}

fn general_contraction_top_left(point: &PointData, phi_term: &AffineMatrix, alpha: f64, brb: &DMatrix<f64>, v: &ProgramVars) -> AffineMatrix {
    let n = point.n();
    v.gamma_tilde
        .times(DMatrix::identity(n, n))
        .plus(&v.nu.times(brb.clone()))
        .minus(phi_term)
        .minus(&v.w_tilde.expr().scaled(2.0 * alpha))
}

/// Program over `{gamma~, nu, tau, chi, W~}` minimizing `tau`.
///
/// With `alpha_g = 0` the contraction block reduces to its `(1,1)` part; with
/// `c1 = 0` the epigraph block is dropped and `chi` is minimized.
pub fn assemble_general_program(point: &PointData, rate: &MetricRate, params: &CvstemParams) -> Result<CvstemProgram, ProgramError> {
    params.validate()?;
    let n = point.n();
    rate.check(n)?;
    let (mut p, vars) = base_program(n, params.c1, params.nu_max, params.gamma_tilde_min)?;
    let brb = point.brb();
    let w = vars.w_tilde.expr();

    let rate_expr = rate.expr(&vars.w_tilde);
    p.add_psd(TAG_RICCATI, riccati_block(&w.left_mul(&point.a), &rate_expr, -1.0, &brb, &vars))?;

    let phi_term = w.left_mul(&point.phi).sym_sum();
    let top_left = general_contraction_top_left(point, &phi_term, params.alpha, &brb, &vars);
    let br = (params.alpha_g > 0.0).then(|| vars.nu.times(DMatrix::identity(n, n) / (2.0 * params.alpha_g)));
    p.add_psd(TAG_CONTRACTION, contraction_block(top_left, &vars, br))?;

    Ok(CvstemProgram { kind: ProgramKind::General, problem: p, vars, c: params.c1 })
}

/// Lagrangian program in the composite error `s`.
pub fn assemble_lagrangian_program(
    point: &LagrangianPoint,
    rate: &MetricRate,
    convention: RateConvention,
    params: &LagrangianParams,
) -> Result<CvstemProgram, ProgramError> {
    params.validate()?;
    let n = point.n();
    rate.check(n)?;
    let c2 = params.c2(&point.h);
    let (mut p, vars) = base_program(n, c2, params.nu_max, params.gamma_tilde_min)?;
    let brb = point.brb();
    let w = vars.w_tilde.expr();
    let id = DMatrix::identity(n, n);

    let sign = match convention {
        RateConvention::AsPrinted => 1.0,
        RateConvention::Congruent => -1.0,
    };
    let rate_expr = rate.expr(&vars.w_tilde);
    p.add_psd(TAG_RICCATI, riccati_block(&w.left_mul(&point.a), &rate_expr, sign, &brb, &vars))?;

    // 2 sym(W~ b_cal R^{-1} B^T) + gamma~ I + nu B R^{-1} B^T - 2 alpha_l W~
    let top_left = w
        .right_mul(&point.cross())
        .sym_sum()
        .plus(&vars.gamma_tilde.times(id.clone()))
        .plus(&vars.nu.times(brb))
        .minus(&w.scaled(2.0 * params.alpha_ell));
    let damping = sym(&(&point.h * params.alpha_ell + &id * params.alpha_gamma));
    let inv = spd_inverse(&damping).ok_or_else(|| ProgramError::InvalidArgument("alpha_l H + alpha_gamma I is not positive definite".into()))?;
    let br = vars.nu.times(sym(&inv) * 0.5);
    p.add_psd(TAG_CONTRACTION, contraction_block(top_left, &vars, Some(br)))?;

    Ok(CvstemProgram { kind: ProgramKind::Lagrangian, problem: p, vars, c: c2 })
}

/// Linear constraint `sum_i a_i rho_i <= b` on the SDC weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightConstraint {
    pub coeffs: Vec<f64>,
    pub bound: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RelaxedOptions {
    /// Leave out the `sym([[nu I, W~], [rho~_i I, W~_i]]) >= 0` coupling blocks.
    pub omit_coupling: bool,
    pub weight_constraints: Vec<WeightConstraint>,
}

/// Program with the SDC weights as decision variables.
///
/// `factor_jacobians[i]` is the Jacobian of `(A_i(x) - A_i(x_d)) x_d` with
/// respect to the error state, `input_jacobian` that of `(B(x) - B(x_d)) u_d`.
/// A single factor delegates to [`assemble_general_program`].
#[allow(clippy::too_many_arguments)]
pub fn assemble_relaxed_sdc_program(
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    factors: &[DMatrix<f64>],
    factor_jacobians: &[DMatrix<f64>],
    input_jacobian: &DMatrix<f64>,
    rate: &MetricRate,
    params: &CvstemParams,
    options: &RelaxedOptions,
) -> Result<CvstemProgram, ProgramError> {
    let s = factors.len();
    if s == 0 || factor_jacobians.len() != s {
        return Err(ProgramError::InvalidArgument("need one Jacobian per SDC factor".into()));
    }
    if s == 1 {
        let point = PointData::new(factors[0].clone(), b.clone(), r.clone(), &factor_jacobians[0] + input_jacobian)?;
        return assemble_general_program(&point, rate, params);
    }
    params.validate()?;
    let n = b.nrows();
    if factors.iter().chain(factor_jacobians).any(|m| m.shape() != (n, n)) || input_jacobian.shape() != (n, n) {
        return Err(ProgramError::InvalidArgument("factor shapes do not match the state dimension".into()));
    }
    for wc in &options.weight_constraints {
        if wc.coeffs.len() != s {
            return Err(ProgramError::InvalidArgument("weight constraint length differs from factor count".into()));
        }
    }
    rate.check(n)?;
    let point = PointData::new(factors[0].clone(), b.clone(), r.clone(), input_jacobian.clone())?;
    let (mut p, mut vars) = base_program(n, params.c1, params.nu_max, params.gamma_tilde_min)?;
    let brb = point.brb();
    let id = DMatrix::identity(n, n);

    for i in 0..s {
        let wi = p.add_symmetric(&format!("W_tilde_{i}"), n);
        let ri = p.add_scalar(&format!("rho_tilde_{i}"));
        vars.sdc.push((wi, ri));
    }
    let w = vars.w_tilde.expr();

    let mut aw = AffineMatrix::zeros(n, n);
    let mut phi_term = w.left_mul(input_jacobian).sym_sum();
    for (i, (wi, _)) in vars.sdc.iter().enumerate() {
        aw = aw.plus(&wi.expr().left_mul(&factors[i]));
        phi_term = phi_term.plus(&wi.expr().left_mul(&factor_jacobians[i]).sym_sum());
    }
    let rate_expr = rate.expr(&vars.w_tilde);
    p.add_psd(TAG_RICCATI, riccati_block(&aw, &rate_expr, -1.0, &brb, &vars))?;

    let top_left = general_contraction_top_left(&point, &phi_term, params.alpha, &brb, &vars);
    let br = (params.alpha_g > 0.0).then(|| vars.nu.times(id.clone() / (2.0 * params.alpha_g)));
    p.add_psd(TAG_CONTRACTION, contraction_block(top_left, &vars, br))?;

    // sum_i W~_i = W~ and sum_i rho~_i = nu, entrywise on the upper triangle.
    for col in 0..n {
        for row in 0..=col {
            let mut coeffs = vec![(vars.w_tilde.coord(row, col), -1.0)];
            coeffs.extend(vars.sdc.iter().map(|(wi, _)| (wi.coord(row, col), 1.0)));
            p.add_equality(TAG_SDC_WEIGHTS, coeffs, 0.0);
        }
    }
    let mut coeffs = vec![(vars.nu.0, -1.0)];
    coeffs.extend(vars.sdc.iter().map(|(_, ri)| (ri.0, 1.0)));
    p.add_equality(TAG_SDC_WEIGHTS, coeffs, 0.0);

    for (wi, ri) in &vars.sdc {
        p.add_psd(TAG_SDC_WEIGHTS, wi.expr())?;
        scalar_ge(&mut p, TAG_SDC_WEIGHTS, ri.expr())?;
        scalar_ge(&mut p, TAG_SDC_WEIGHTS, vars.nu.expr().minus(&ri.expr()))?;
        if !options.omit_coupling {
            let off = w.plus(&ri.times(id.clone())).scaled(0.5);
            let blk = AffineMatrix::blocks(&[vec![vars.nu.times(id.clone()), off.clone()], vec![off, wi.expr()]]);
            p.add_psd(TAG_SDC_COUPLING, blk)?;
        }
    }
    // sum_i a_i rho_i <= b  <=>  b nu - sum_i a_i rho~_i >= 0
    for wc in &options.weight_constraints {
        let mut e = vars.nu.expr().scaled(wc.bound);
        for ((_, ri), &a) in vars.sdc.iter().zip(&wc.coeffs) {
            e = e.minus(&ri.expr().scaled(a));
        }
        scalar_ge(&mut p, TAG_SDC_WEIGHTS, e)?;
    }

    Ok(CvstemProgram { kind: ProgramKind::RelaxedSdc, problem: p, vars, c: params.c1 })
}

/// Adds `nu ||R^{-1} B^T|| ||e|| <= (u_max - u_d_norm) lambda_min(W~)` through an
/// auxiliary `ell` with `W~ >= ell I`.
pub fn add_input_norm_constraint(
    program: &mut CvstemProgram,
    e: &DVector<f64>,
    u_d_norm: f64,
    u_max: f64,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(), ProgramError> {
    if !(u_max >= u_d_norm) {
        return Err(ProgramError::InvalidArgument(format!("u_max {u_max} is below the desired input norm {u_d_norm}")));
    }
    if program.vars.ell.is_some() {
        return Err(ProgramError::InvalidArgument("input-norm constraint already present".into()));
    }
    check_weight(r)?;
    let n = program.vars.w_tilde.dim;
    if e.len() != n || b.nrows() != n || r.nrows() != b.ncols() {
        return Err(ProgramError::InvalidArgument("input constraint dimensions do not match".into()));
    }
    let gain = spectral_norm(&(spd_inverse(r).expect("checked") * b.transpose()));
    let ell = program.problem.add_scalar("ell");
    let v = &program.vars;
    program.problem.add_psd(TAG_INPUT, v.w_tilde.expr().minus(&ell.times(DMatrix::identity(n, n))))?;
    if u_max.is_finite() {
        let lin = ell.expr().scaled(u_max - u_d_norm).minus(&v.nu.expr().scaled(gain * e.norm()));
        program.problem.add_psd(TAG_INPUT, lin)?;
    }
    program.vars.ell = Some(ell);
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricSolution {
    pub status: SdpStatus,
    pub w_tilde: DMatrix<f64>,
    pub nu: f64,
    pub chi: f64,
    pub tau: f64,
    pub gamma_tilde: f64,
    /// `(W~_i, rho~_i)` of the relaxed program.
    pub sdc_blocks: Vec<(DMatrix<f64>, f64)>,
    pub min_block_eigenvalue: f64,
    pub iterations: usize,
    pub solve_seconds: f64,
    pub backend: String,
}

impl MetricSolution {
    /// Recovered weights `rho_i = rho~_i / nu`.
    pub fn sdc_weights(&self) -> Vec<f64> {
        self.sdc_blocks.iter().map(|(_, r)| r / self.nu).collect()
    }

    pub fn is_usable(&self) -> bool {
        self.status != SdpStatus::Infeasible
    }
}

/// Solves an assembled program. Infeasibility is returned as a status, not an error.
pub fn solve(program: &CvstemProgram, backend: &mut dyn SdpBackend) -> Result<MetricSolution, ProgramError> {
    let sol = backend.solve(&program.problem)?;
    let v = &program.vars;
    let y = &sol.y;
    let n = v.w_tilde.dim;
    if sol.status == SdpStatus::Infeasible {
        return Ok(MetricSolution {
            status: sol.status,
            w_tilde: DMatrix::identity(n, n),
            nu: f64::NAN,
            chi: f64::NAN,
            tau: f64::NAN,
            gamma_tilde: f64::NAN,
            sdc_blocks: Vec::new(),
            min_block_eigenvalue: f64::NAN,
            iterations: sol.iterations,
            solve_seconds: sol.solve_seconds,
            backend: backend.name().to_string(),
        });
    }
    let chi = v.chi.value(y);
    Ok(MetricSolution {
        status: sol.status,
        w_tilde: sym(&v.w_tilde.value(y)),
        nu: v.nu.value(y),
        chi,
        tau: v.tau.map_or(chi, |t| t.value(y)),
        gamma_tilde: v.gamma_tilde.value(y),
        sdc_blocks: v.sdc.iter().map(|(w, r)| (sym(&w.value(y)), r.value(y))).collect(),
        min_block_eigenvalue: sol.min_eigenvalues.iter().copied().fold(f64::INFINITY, f64::min),
        iterations: sol.iterations,
        solve_seconds: sol.solve_seconds,
        backend: backend.name().to_string(),
    })
}

/// `M = nu W~^{-1}` (symmetrized) and `gamma = gamma~ / nu`.
pub fn reconstruct_metric(solution: &MetricSolution) -> Result<(DMatrix<f64>, f64), ProgramError> {
    if !solution.is_usable() {
        return Err(ProgramError::InvalidArgument("no metric in an infeasible solution".into()));
    }
    if !(solution.nu > 0.0) {
        return Err(ProgramError::Solver(SdpError::Numerical(format!("non-positive nu {}", solution.nu))));
    }
    let inv = spd_inverse(&solution.w_tilde).ok_or_else(|| ProgramError::Solver(SdpError::Numerical("W~ is numerically singular".into())))?;
    if condition_number(&solution.w_tilde) > 1e12 {
        return Err(ProgramError::Solver(SdpError::Numerical("W~ is numerically singular".into())));
    }
    Ok((sym(&(inv * solution.nu)), solution.gamma_tilde / solution.nu))
}

/// Residuals of the original (non-convex) conditions at a metric.
#[derive(Clone, Debug, Serialize)]
pub struct FeasibilityReport {
    /// Largest eigenvalue of the Riccati inequality left side (must be `<= 0`).
    pub riccati_max_eig: f64,
    /// Smallest eigenvalue of the contraction condition left minus right side (must be `>= 0`).
    pub contraction_min_eig: f64,
    /// Magnitude of the largest term in each condition; residuals are judged relative to it.
    pub riccati_scale: f64,
    pub contraction_scale: f64,
    /// `kappa(W) + c kappa(W)^2 lambda_min(W)` with `W = M^{-1}`.
    pub objective_bound: f64,
    pub passed: bool,
}

impl FeasibilityReport {
    pub fn riccati_relative(&self) -> f64 {
        self.riccati_max_eig / self.riccati_scale
    }

    pub fn contraction_relative(&self) -> f64 {
        self.contraction_min_eig / self.contraction_scale
    }
}

fn objective_bound(m: &DMatrix<f64>, c: f64) -> f64 {
    let (lo, hi) = eig_extremes(m);
    let kappa = hi / lo;
    kappa + c * kappa * kappa / hi
}

fn finish_report(riccati: DMatrix<f64>, r_terms: &[f64], contraction: DMatrix<f64>, c_terms: &[f64], m: &DMatrix<f64>, c: f64, tol: f64) -> FeasibilityReport {
    let scale = |t: &[f64]| t.iter().copied().fold(1.0, f64::max);
    let riccati_scale = scale(r_terms);
    let contraction_scale = scale(c_terms);
    let riccati_max_eig = lambda_max(&sym(&riccati));
    let contraction_min_eig = lambda_min(&sym(&contraction));
    FeasibilityReport {
        riccati_max_eig,
        contraction_min_eig,
        riccati_scale,
        contraction_scale,
        objective_bound: objective_bound(m, c),
        passed: riccati_max_eig <= tol * riccati_scale && contraction_min_eig >= -tol * contraction_scale,
    }
}

/// `dM/dt + 2 sym(M A) + gamma M^2 - M B R^{-1} B^T M`.
pub fn general_riccati_lhs(m: &DMatrix<f64>, gamma: f64, point: &PointData, m_dot: &DMatrix<f64>) -> DMatrix<f64> {
    let ma = m * &point.a;
    m_dot + &ma + ma.transpose() + m * m * gamma - m * point.brb() * m
}

/// `gamma M^2 + M B R^{-1} B^T M - phi^T M - M phi - 2 alpha_g I - 2 alpha M`.
pub fn general_contraction_lhs(m: &DMatrix<f64>, gamma: f64, point: &PointData, params: &CvstemParams) -> DMatrix<f64> {
    let n = m.nrows();
    let mp = m * &point.phi;
    m * m * gamma + m * point.brb() * m - &mp - mp.transpose() - DMatrix::identity(n, n) * (2.0 * params.alpha_g) - m * (2.0 * params.alpha)
}

pub fn verify_nonconvex_feasibility(
    m: &DMatrix<f64>,
    gamma: f64,
    point: &PointData,
    m_dot: &DMatrix<f64>,
    params: &CvstemParams,
    tol: f64,
) -> FeasibilityReport {
    let brb = point.brb();
    let mn = m.norm();
    let r_terms = [m_dot.norm(), 2.0 * (m * &point.a).norm(), gamma * mn * mn, (m * &brb * m).norm()];
    let c_terms = [gamma * mn * mn, (m * &brb * m).norm(), 2.0 * (m * &point.phi).norm(), 2.0 * params.alpha_g, 2.0 * params.alpha * mn];
    finish_report(
        general_riccati_lhs(m, gamma, point, m_dot),
        &r_terms,
        general_contraction_lhs(m, gamma, point, params),
        &c_terms,
        m,
        params.c1,
        tol,
    )
}

/// Lagrangian Riccati left side `dM + M A + A^T M - M B R^{-1} B^T M + gamma M^2`.
pub fn lagrangian_riccati_lhs(m: &DMatrix<f64>, gamma: f64, point: &LagrangianPoint, m_dot: &DMatrix<f64>) -> DMatrix<f64> {
    let ma = m * &point.a;
    m_dot + &ma + ma.transpose() - m * point.brb() * m + m * m * gamma
}

/// `2 sym(b_cal R^{-1} B^T M) + gamma M^2 + M B R^{-1} B^T M - 2 alpha_gamma I - 2 alpha_l (H + M)`.
pub fn lagrangian_contraction_lhs(m: &DMatrix<f64>, gamma: f64, point: &LagrangianPoint, params: &LagrangianParams) -> DMatrix<f64> {
    let n = m.nrows();
    let cross = point.cross() * m;
    &cross + cross.transpose() + m * m * gamma + m * point.brb() * m
        - DMatrix::identity(n, n) * (2.0 * params.alpha_gamma)
        - (&point.h + m) * (2.0 * params.alpha_ell)
}

pub fn verify_lagrangian_feasibility(
    m: &DMatrix<f64>,
    gamma: f64,
    point: &LagrangianPoint,
    m_dot: &DMatrix<f64>,
    params: &LagrangianParams,
    tol: f64,
) -> FeasibilityReport {
    let brb = point.brb();
    let mn = m.norm();
    let r_terms = [m_dot.norm(), 2.0 * (m * &point.a).norm(), gamma * mn * mn, (m * &brb * m).norm()];
    let c_terms = [
        2.0 * (point.cross() * m).norm(),
        gamma * mn * mn,
        (m * &brb * m).norm(),
        2.0 * params.alpha_gamma,
        2.0 * params.alpha_ell * (&point.h + m).norm(),
    ];
    finish_report(
        lagrangian_riccati_lhs(m, gamma, point, m_dot),
        &r_terms,
        lagrangian_contraction_lhs(m, gamma, point, params),
        &c_terms,
        m,
        params.c2(&point.h),
        tol,
    )
}

/// Ratio of objective values `|a - b| / max(|a|, |b|, 1)`.
pub fn relative_difference(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::InteriorPointSolver;

    fn scalar_point(a: f64, b: f64) -> PointData {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        PointData::new(m(a), m(b), m(1.0), m(0.0)).unwrap()
    }

    #[test]
    fn reconstruction_examples() {
        let mut sol = MetricSolution {
            status: SdpStatus::Optimal,
            w_tilde: DMatrix::identity(2, 2),
            nu: 2.0,
            chi: 1.0,
            tau: 1.0,
            gamma_tilde: 1.0,
            sdc_blocks: vec![],
            min_block_eigenvalue: 0.0,
            iterations: 0,
            solve_seconds: 0.0,
            backend: String::new(),
        };
        let (m, g) = reconstruct_metric(&sol).unwrap();
        assert!((m - DMatrix::identity(2, 2) * 2.0).norm() < 1e-14);
        assert!((g - 0.5).abs() < 1e-15);
        sol.w_tilde = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        sol.nu = 1.0;
        let (m, _) = reconstruct_metric(&sol).unwrap();
        assert!((m - DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.25]))).norm() < 1e-14);
    }

    #[test]
    fn general_program_has_the_four_groups() {
        let params = CvstemParams::new(0.1, 0.05, 0.1).unwrap();
        let prog = assemble_general_program(&scalar_point(-1.0, 1.0), &MetricRate::Zero, &params).unwrap();
        for tag in [TAG_BOUNDS, TAG_RICCATI, TAG_CONTRACTION, TAG_EPIGRAPH] {
            assert!(prog.problem.blocks_with_tag(tag).count() > 0, "{tag}");
        }
    }

    #[test]
    fn non_pd_weight_is_rejected() {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        assert!(PointData::new(m(-1.0), m(1.0), m(-1.0), m(0.0)).is_err());
    }

    #[test]
    fn unstabilizable_point_is_infeasible() {
        let params = CvstemParams::new(0.1, 0.05, 0.1).unwrap();
        let prog = assemble_general_program(&scalar_point(1.0, 0.0), &MetricRate::Zero, &params).unwrap();
        let sol = solve(&prog, &mut InteriorPointSolver::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
    }
}
