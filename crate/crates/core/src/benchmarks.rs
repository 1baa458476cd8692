//! Benchmark plants, baseline controllers and the config-driven runner.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    lagrangian_mse_bound, tracking_mse_bound, AnalysisError, BoundReport, LagrangianBoundInputs, RunExtremes, TrackingConstants,
};
use crate::controller::{
    lagrangian_control, ControllerSettings, CvstemController, InputLimit, JointReference, LagrangianCvstemController, LagrangianGains,
    LagrangianSystem, RateMode, ResolvePolicy,
};
use crate::linalg::skew;
use crate::program::{CvstemParams, LagrangianParams, ProgramError};
use crate::sdc::SdcForm;
use crate::sdp::InteriorPointSolver;
use crate::sim::{
    simulate_closed_loop, ControlError, ControlOutput, Controller, MatrixField, Reference, ReferencePoint, SdeDefinition, SimConfig, SimError,
    StateMap, StepDiagnostics, TrajectoryRecord,
};

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

/// Closure-backed reference shared across threads.
pub type SharedReference = Arc<dyn Reference>;

struct ClosureReference<F>(F);

impl<F> Reference for ClosureReference<F>
where
    F: Fn(f64) -> ReferencePoint + Send + Sync,
{
    fn at(&self, t: f64) -> ReferencePoint {
        (self.0)(t)
    }
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

/// Joint-space reference `(q_d, q'_d, q''_d)` lifted to `x_d = [q_d; q'_d]`.
fn joint_reference<F>(f: F) -> SharedReference
where
    F: Fn(f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) + Send + Sync + 'static,
{
    Arc::new(ClosureReference(move |t| {
        let (q, qd, qdd) = f(t);
        ReferencePoint { x_d: stack(&q, &qd), x_d_dot: stack(&qd, &qdd) }
    }))
}

// ---------------------------------------------------------------- attitude

/// Rigid-body attitude plant in modified Rodrigues parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttitudeParams {
    /// Principal moments of inertia.
    pub inertia: [f64; 3],
    /// Diffusion magnitude on each rate channel.
    pub noise: f64,
}

impl Default for AttitudeParams {
    fn default() -> Self {
        Self { inertia: [150.0, 100.0, 120.0], noise: 0.2 }
    }
}

/// `q' = Z(q) omega` with `Z = ((1 - q^T q) I + 2 [q x] + 2 q q^T) / 4`.
pub fn mrp_kinematics(q: &DVector<f64>) -> DMatrix<f64> {
    let qq = q.dot(q);
    (DMatrix::identity(3, 3) * (1.0 - qq) + skew(q.as_slice()) * 2.0 + q * q.transpose() * 2.0) / 4.0
}

/// Time derivative of [`mrp_kinematics`] along `q'`.
pub fn mrp_kinematics_rate(q: &DVector<f64>, qd: &DVector<f64>) -> DMatrix<f64> {
    (DMatrix::identity(3, 3) * (-2.0 * q.dot(qd)) + skew(qd.as_slice()) * 2.0 + (qd * q.transpose() + q * qd.transpose()) * 2.0) / 4.0
}

/// Shadow-set switch: for `|q| > 1`, `q -> -q/|q|^2` with the matching rate.
pub fn mrp_shadow(x: &DVector<f64>) -> DVector<f64> {
    let q = x.rows(0, 3).into_owned();
    let qq = q.dot(&q);
    if qq <= 1.0 {
        return x.clone();
    }
    let qd = x.rows(3, 3).into_owned();
    let qs = -&q / qq;
    let qds = -&qd / qq + &q * (2.0 * q.dot(&qd) / (qq * qq));
    stack(&qs, &qds)
}

/// Euler's equations `J w' = -w x J w + tau` written in MRP coordinates:
/// `H = Z^{-T} J Z^{-1}`, `C = -Z^{-T} J Z^{-1} Z' Z^{-1} - Z^{-T} [(J Z^{-1} q') x] Z^{-1}`, `B = Z^{-T}`.
pub fn attitude_lagrangian(params: &AttitudeParams) -> LagrangianSystem {
    let j = DMatrix::from_diagonal(&DVector::from_row_slice(&params.inertia));
    let (j1, j2) = (j.clone(), j.clone());
    let noise = params.noise;
    let zinv = |q: &DVector<f64>| mrp_kinematics(q).try_inverse().expect("MRP kinematics are invertible");
    let inertia = Arc::new(move |q: &DVector<f64>| {
        let zi = zinv(q);
        crate::linalg::sym(&(zi.transpose() * &j1 * &zi))
    });
    let coriolis = Arc::new(move |q: &DVector<f64>, qd: &DVector<f64>| {
        let zi = zinv(q);
        let zdot = mrp_kinematics_rate(q, qd);
        let h = zi.transpose() * &j2 * &zi;
        let jw = &j2 * (&zi * qd);
        -(h * zdot * &zi) - zi.transpose() * skew(jw.as_slice()) * &zi
    });
    let inertia_for_noise = inertia.clone();
    LagrangianSystem {
        dof: 3,
        m: 3,
        d: 1,
        inertia,
        coriolis,
        gravity: Arc::new(|_| DVector::zeros(3)),
        actuation: Arc::new(move |q, _| zinv(q).transpose()),
        // H times the rate-channel diffusion, so the state-space noise is `noise * [0; 1; 1; 1]`.
        noise: Arc::new(move |x, _| inertia_for_noise(&x.rows(0, 3).into_owned()) * DMatrix::from_element(3, 1, noise)),
    }
}

/// `q_d = [0.3 sin(0.2 pi t), 0.2 sin(0.4 pi t + pi/6), 0]`.
pub fn attitude_reference() -> SharedReference {
    joint_reference(|t| {
        let (w1, w2) = (2.0 * PI * 0.1, 2.0 * PI * 0.2);
        let ph = PI / 6.0;
        let q = DVector::from_vec(vec![0.3 * (w1 * t).sin(), 0.2 * (w2 * t + ph).sin(), 0.0]);
        let qd = DVector::from_vec(vec![0.3 * w1 * (w1 * t).cos(), 0.2 * w2 * (w2 * t + ph).cos(), 0.0]);
        let qdd = DVector::from_vec(vec![-0.3 * w1 * w1 * (w1 * t).sin(), -0.2 * w2 * w2 * (w2 * t + ph).sin(), 0.0]);
        (q, qd, qdd)
    })
}

pub fn attitude_initial_state() -> DVector<f64> {
    DVector::from_vec(vec![0.9, -0.9, 0.7, 0.6, 0.7, -0.5])
}

/// Exact SDC factor `[[0, I], [0, Z' Z^{-1} - Z J^{-1} [w x] J Z^{-1}]]`, `w = Z^{-1} q'`.
///
/// Writes the gyroscopic torque as `[w x] J w` instead of `-[(J w) x] w`. The
/// velocity block is then similar to a skew matrix plus the kinematic term, so
/// fast spin does not show up as an unstable direction of `A`.
pub fn attitude_factor(params: &AttitudeParams) -> MatrixField {
    let j = DMatrix::from_diagonal(&DVector::from_row_slice(&params.inertia));
    let jinv = DMatrix::from_diagonal(&DVector::from_iterator(3, params.inertia.iter().map(|v| 1.0 / v)));
    Arc::new(move |x, _| {
        let q = x.rows(0, 3).into_owned();
        let qd = x.rows(3, 3).into_owned();
        let z = mrp_kinematics(&q);
        let zi = z.clone().try_inverse().expect("MRP kinematics are invertible");
        let w = &zi * &qd;
        let vv = mrp_kinematics_rate(&q, &qd) * &zi - &z * &jinv * skew(w.as_slice()) * &j * &zi;
        let mut a = DMatrix::zeros(6, 6);
        a.view_mut((0, 3), (3, 3)).fill_with_identity();
        a.view_mut((3, 3), (3, 3)).copy_from(&vv);
        a
    })
}

pub struct AttitudePlant {
    pub system: LagrangianSystem,
    pub sde: SdeDefinition,
    pub sdc: SdcForm,
    pub reference: SharedReference,
    pub x0: DVector<f64>,
}

pub fn attitude_system(params: &AttitudeParams) -> AttitudePlant {
    let system = attitude_lagrangian(params);
    let rechart: StateMap = Arc::new(mrp_shadow);
    let sde = system.to_sde().with_rechart(rechart);
    let sdc = SdcForm::single(attitude_factor(params));
    AttitudePlant { system, sde, sdc, reference: attitude_reference(), x0: attitude_initial_state() }
}

// --------------------------------------------------------------- formation

/// Point-mass agents in a circular-orbit rotating frame, tracked with a ring-coupled composite law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormationParams {
    pub agents: usize,
    /// Orbital rate of the rotating frame.
    pub omega: f64,
    /// Radius of the reference circle.
    pub radius: f64,
    /// Leader phase at `t = 0`.
    pub phase: f64,
    /// Diffusion magnitude on every generalized-force channel.
    pub noise: f64,
    /// Half side of the cube that initial positions are drawn from.
    pub initial_spread: f64,
}

impl Default for FormationParams {
    fn default() -> Self {
        Self { agents: 5, omega: 2.0 * PI / 50.0, radius: 2.0, phase: 0.0, noise: 1.0, initial_spread: 0.2 }
    }
}

/// Graph Laplacian of the undirected ring on `p` nodes.
pub fn ring_laplacian(p: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(p, p);
    if p < 2 {
        return l;
    }
    for i in 0..p {
        let j = (i + 1) % p;
        if i == j {
            continue;
        }
        l[(i, j)] -= 1.0;
        l[(j, i)] -= 1.0;
        l[(i, i)] += 1.0;
        l[(j, j)] += 1.0;
    }
    l
}

/// Unit-mass linearized relative dynamics per agent:
/// `x'' - 2w y' - 3w^2 x = u_x`, `y'' + 2w x' = u_y`, `z'' + w^2 z = u_z`.
pub fn formation_lagrangian(params: &FormationParams) -> LagrangianSystem {
    let p = params.agents;
    let n = 3 * p;
    let w = params.omega;
    let noise = params.noise;
    LagrangianSystem {
        dof: n,
        m: n,
        d: 1,
        inertia: Arc::new(move |_| DMatrix::identity(n, n)),
        coriolis: Arc::new(move |_, _| {
            let mut c = DMatrix::zeros(n, n);
            for j in 0..p {
                c[(3 * j, 3 * j + 1)] = -2.0 * w;
                c[(3 * j + 1, 3 * j)] = 2.0 * w;
            }
            c
        }),
        gravity: Arc::new(move |q| {
            let mut g = DVector::zeros(n);
            for j in 0..p {
                g[3 * j] = -3.0 * w * w * q[3 * j];
                g[3 * j + 2] = w * w * q[3 * j + 2];
            }
            g
        }),
        actuation: Arc::new(move |_, _| DMatrix::identity(n, n)),
        noise: Arc::new(move |_, _| DMatrix::from_element(n, 1, noise)),
    }
}

/// Agent `j` follows the leader circle shifted by `2 pi j / p` in phase.
pub fn formation_reference(params: &FormationParams) -> SharedReference {
    let (p, w, r, ph) = (params.agents, params.omega, params.radius, params.phase);
    joint_reference(move |t| {
        let mut q = DVector::zeros(3 * p);
        let mut qd = DVector::zeros(3 * p);
        let mut qdd = DVector::zeros(3 * p);
        for j in 0..p {
            let a = w * t + ph + 2.0 * PI * j as f64 / p as f64;
            q[3 * j] = r * a.sin();
            q[3 * j + 1] = r * a.cos();
            qd[3 * j] = r * w * a.cos();
            qd[3 * j + 1] = -r * w * a.sin();
            qdd[3 * j] = -r * w * w * a.sin();
            qdd[3 * j + 1] = -r * w * w * a.cos();
        }
        (q, qd, qdd)
    })
}

/// Positions uniform on the cube `[-spread, spread]^3`, zero velocities.
pub fn formation_initial_state(params: &FormationParams, seed: u64) -> DVector<f64> {
    let n = 3 * params.agents;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f0f0_a5a5_0001);
    let s = params.initial_spread;
    let mut x = DVector::zeros(2 * n);
    for i in 0..n {
        x[i] = rng.random_range(-s..=s);
    }
    x
}

/// `Lambda = lambda I` and `K = k1 I + k2 (L_ring (x) I_3)`: tracking damping
/// plus diffusive coupling of neighbouring composite variables.
pub fn formation_gains(agents: usize, lambda: f64, k1: f64, k2: f64) -> LagrangianGains {
    let n = 3 * agents;
    let l = ring_laplacian(agents).kronecker(&DMatrix::<f64>::identity(3, 3));
    LagrangianGains::constant(DMatrix::identity(n, n) * lambda, DMatrix::identity(n, n) * k1 + l * k2)
}

pub struct FormationPlant {
    pub system: LagrangianSystem,
    pub sde: SdeDefinition,
    pub reference: SharedReference,
}

pub fn formation_system(params: &FormationParams) -> Result<FormationPlant, BenchmarkError> {
    if params.agents < 2 {
        return Err(BenchmarkError::Config("formation needs at least two agents".into()));
    }
    let system = formation_lagrangian(params);
    let sde = system.to_sde();
    Ok(FormationPlant { system, sde, reference: formation_reference(params) })
}

// ----------------------------------------------------------- small plants

/// `dx = (a x + u) dt + g dW`, reference `x_d = sin t`.
pub fn scalar_system(a: f64, g: f64) -> (SdeDefinition, SdcForm, SharedReference) {
    let sde = SdeDefinition::new(
        1,
        1,
        1,
        Arc::new(move |x, _| x * a),
        Arc::new(|_, _| DMatrix::identity(1, 1)),
        Arc::new(move |_, _| DMatrix::from_element(1, 1, g)),
    );
    let sdc = SdcForm::single(Arc::new(move |_, _| DMatrix::from_element(1, 1, a)));
    let reference: SharedReference = Arc::new(ClosureReference(|t: f64| ReferencePoint {
        x_d: DVector::from_element(1, t.sin()),
        x_d_dot: DVector::from_element(1, t.cos()),
    }));
    (sde, sdc, reference)
}

/// One-link pendulum `q'' + sin q = u + g dW`, reference `q_d = 0.5 sin t`.
pub fn pendulum_system(g: f64) -> (LagrangianSystem, SharedReference) {
    let system = LagrangianSystem {
        dof: 1,
        m: 1,
        d: 1,
        inertia: Arc::new(|_| DMatrix::identity(1, 1)),
        coriolis: Arc::new(|_, _| DMatrix::zeros(1, 1)),
        gravity: Arc::new(|q| q.map(f64::sin)),
        actuation: Arc::new(|_, _| DMatrix::identity(1, 1)),
        noise: Arc::new(move |_, _| DMatrix::from_element(1, 1, g)),
    };
    let reference = joint_reference(|t| {
        (DVector::from_element(1, 0.5 * t.sin()), DVector::from_element(1, 0.5 * t.cos()), DVector::from_element(1, -0.5 * t.sin()))
    });
    (system, reference)
}

// -------------------------------------------------------------- baselines

/// `-(K_P e + K_I int e + K_D e')`.
pub fn pid_control(kp: &DMatrix<f64>, ki: &DMatrix<f64>, kd: &DMatrix<f64>, e: &DVector<f64>, e_int: &DVector<f64>, e_dot: &DVector<f64>) -> DVector<f64> {
    -(kp * e + ki * e_int + kd * e_dot)
}

/// PID on the configuration error of a second-order plant with state `[q; q']`.
/// The integral is accumulated with the left endpoint and clamped
/// elementwise at `+-clamp` when `K_I != 0`.
pub struct PidController {
    pub kp: DMatrix<f64>,
    pub ki: DMatrix<f64>,
    pub kd: DMatrix<f64>,
    pub clamp: f64,
    dof: usize,
    integral: DVector<f64>,
    last: Option<(f64, DVector<f64>)>,
}

impl PidController {
    pub fn new(dof: usize, kp: f64, ki: f64, kd: f64, u_max: Option<f64>) -> Self {
        let eye = DMatrix::<f64>::identity(dof, dof);
        let ki_m = &eye * ki;
        let clamp = match u_max {
            Some(u) if ki != 0.0 => 10.0 * u / crate::linalg::spectral_norm(&ki_m),
            _ => f64::INFINITY,
        };
        Self { kp: &eye * kp, ki: ki_m, kd: &eye * kd, clamp, dof, integral: DVector::zeros(dof), last: None }
    }
}

impl Controller for PidController {
    fn control(&mut self, t: f64, x: &DVector<f64>, reference: &ReferencePoint) -> Result<ControlOutput, ControlError> {
        let n = self.dof;
        let e = x.rows(0, n) - reference.x_d.rows(0, n);
        let e_dot = x.rows(n, n) - reference.x_d.rows(n, n);
        if let Some((t0, e0)) = &self.last {
            self.integral += e0 * (t - t0);
            let c = self.clamp;
            self.integral.apply(|v| *v = v.clamp(-c, c));
        }
        self.last = Some((t, e.clone()));
        let u = pid_control(&self.kp, &self.ki, &self.kd, &e, &self.integral, &e_dot);
        let diagnostics = StepDiagnostics { feedback_norm: Some(u.norm()), ..Default::default() };
        Ok(ControlOutput { u, diagnostics })
    }
}

/// `u_n` alone: the composite-variable law with no metric term.
pub struct NominalController {
    pub system: LagrangianSystem,
    pub gains: LagrangianGains,
}

impl Controller for NominalController {
    fn control(&mut self, t: f64, x: &DVector<f64>, reference: &ReferencePoint) -> Result<ControlOutput, ControlError> {
        let (q, qd) = self.system.split(x);
        let jr = JointReference::from_point(reference, self.system.dof);
        let out = lagrangian_control(&self.system, &self.gains, None, &q, &qd, &jr, t)?;
        let diagnostics = StepDiagnostics { internal_error_sq: Some(out.s.norm_squared()), ..Default::default() };
        Ok(ControlOutput { u: out.u, diagnostics })
    }
}

// ------------------------------------------------------------------ runner

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkKind {
    Attitude,
    Formation,
    Scalar,
    Pendulum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Cvstem,
    Pid,
    Nominal,
}

impl ControllerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::Cvstem => "cvstem",
            ControllerKind::Pid => "pid",
            ControllerKind::Nominal => "nominal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gains {
    #[serde(rename = "K_P")]
    pub k_p: f64,
    #[serde(rename = "K_I")]
    pub k_i: f64,
    #[serde(rename = "K_D")]
    pub k_d: f64,
    /// Tracking damping of the composite law.
    #[serde(rename = "K_1")]
    pub k_1: f64,
    /// Ring-coupling gain of the composite law.
    #[serde(rename = "K_2")]
    pub k_2: f64,
    #[serde(rename = "Lambda")]
    pub lambda: f64,
}

/// One closed-loop experiment. Matrix gains are multiples of the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub benchmark: BenchmarkKind,
    pub controller: ControllerKind,
    pub horizon: f64,
    pub dt_sim: f64,
    pub dt_ctrl: f64,
    pub alpha: f64,
    /// `alpha_g` of the general program, or `alpha_gamma` of the Lagrangian one.
    pub alpha_g: f64,
    /// Objective constant: `c_1`, or the offset added to `lambda_max(H)` for `c_2`.
    pub c: f64,
    pub nu_max: f64,
    /// `R = R I`.
    #[serde(rename = "R")]
    pub r: f64,
    pub u_max: Option<f64>,
    /// Apply `u_max` to the metric feedback term only.
    #[serde(default)]
    pub u_max_feedback_only: bool,
    /// Re-test the input bound condition at every integration step, not only at samples.
    #[serde(default)]
    pub u_max_check_every_step: bool,
    pub gains: Gains,
    /// Multiplies every diffusion term.
    #[serde(default = "one")]
    pub noise_scale: f64,
    #[serde(default)]
    pub policy: ResolvePolicy,
    #[serde(default)]
    pub rate_mode: RateMode,
    #[serde(default)]
    pub attitude: AttitudeParams,
    #[serde(default)]
    pub formation: FormationParams,
}

fn one() -> f64 {
    1.0
}

impl BenchmarkConfig {
    pub fn attitude(controller: ControllerKind) -> Self {
        Self {
            benchmark: BenchmarkKind::Attitude,
            controller,
            horizon: 50.0,
            dt_sim: 0.01,
            dt_ctrl: 0.1,
            alpha: 1e-3,
            alpha_g: 1e-3,
            c: 1.0,
            nu_max: 1e7,
            r: 1.0,
            u_max: Some(700.0),
            u_max_feedback_only: false,
            u_max_check_every_step: false,
            gains: Gains { k_p: 1300.0, k_i: 300.0, k_d: 1300.0, k_1: 100.0, k_2: 0.0, lambda: 1.0 },
            noise_scale: 1.0,
            policy: ResolvePolicy::default(),
            rate_mode: RateMode::Ignore,
            attitude: AttitudeParams::default(),
            formation: FormationParams::default(),
        }
    }

    pub fn formation(controller: ControllerKind) -> Self {
        Self {
            benchmark: BenchmarkKind::Formation,
            controller,
            horizon: 50.0,
            dt_sim: 0.01,
            dt_ctrl: 0.5,
            alpha: 1e-3,
            alpha_g: 1e-3,
            c: 0.0,
            nu_max: 1e3,
            r: 1.0,
            u_max: Some(1.0),
            u_max_feedback_only: false,
            u_max_check_every_step: false,
            gains: Gains { k_p: 7.0, k_i: 0.0, k_d: 11.0, k_1: 5.0, k_2: 2.0, lambda: 1.0 },
            noise_scale: 1.0,
            policy: ResolvePolicy::default(),
            rate_mode: RateMode::Ignore,
            attitude: AttitudeParams::default(),
            formation: FormationParams::default(),
        }
    }

    pub fn scalar(controller: ControllerKind) -> Self {
        Self {
            benchmark: BenchmarkKind::Scalar,
            controller,
            horizon: 50.0,
            dt_sim: 0.01,
            dt_ctrl: 0.1,
            alpha: 0.5,
            alpha_g: 0.05,
            c: 1.0,
            nu_max: 10.0,
            r: 1.0,
            u_max: None,
            u_max_feedback_only: false,
            u_max_check_every_step: false,
            gains: Gains { k_p: 2.0, k_i: 0.0, k_d: 0.0, k_1: 1.0, k_2: 0.0, lambda: 1.0 },
            noise_scale: 1.0,
            policy: ResolvePolicy::default(),
            rate_mode: RateMode::Ignore,
            attitude: AttitudeParams::default(),
            formation: FormationParams::default(),
        }
    }

    pub fn pendulum(controller: ControllerKind) -> Self {
        Self {
            benchmark: BenchmarkKind::Pendulum,
            controller,
            horizon: 50.0,
            dt_sim: 0.01,
            dt_ctrl: 0.1,
            alpha: 0.1,
            alpha_g: 0.01,
            c: 0.5,
            nu_max: 10.0,
            r: 1.0,
            u_max: None,
            u_max_feedback_only: false,
            u_max_check_every_step: false,
            gains: Gains { k_p: 4.0, k_i: 0.0, k_d: 4.0, k_1: 1.0, k_2: 0.0, lambda: 1.0 },
            noise_scale: 1.0,
            policy: ResolvePolicy::default(),
            rate_mode: RateMode::Ignore,
            attitude: AttitudeParams::default(),
            formation: FormationParams::default(),
        }
    }

    /// Scalar plant constants `(a, g)`.
    pub const SCALAR_PLANT: (f64, f64) = (-1.0, 0.2);
    /// Pendulum diffusion.
    pub const PENDULUM_NOISE: f64 = 0.2;

    pub fn validate(&self) -> Result<(), BenchmarkError> {
        let bad = |m: &str| Err(BenchmarkError::Config(m.to_string()));
        if !(self.dt_sim > 0.0 && self.horizon > 0.0) {
            return bad("dt_sim and horizon must be positive");
        }
        let ratio = self.dt_ctrl / self.dt_sim;
        if self.dt_ctrl < self.dt_sim * (1.0 - 1e-9) || (ratio - ratio.round()).abs() > 1e-6 {
            return bad("dt_ctrl must be an integer multiple of dt_sim");
        }
        if !(self.r > 0.0) {
            return bad("R must be positive");
        }
        if self.u_max.is_some_and(|u| !(u > 0.0)) {
            return bad("u_max must be positive");
        }
        if self.noise_scale < 0.0 {
            return bad("noise_scale must be non-negative");
        }
        Ok(())
    }

    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig::new(self.dt_sim, self.horizon, seed)
    }

    fn settings(&self) -> ControllerSettings {
        ControllerSettings {
            policy: self.policy,
            rate_mode: self.rate_mode,
            sample_period: self.dt_ctrl,
            input_limit: self.u_max.map(|u_max| InputLimit { u_max, feedback_only: self.u_max_feedback_only, check_every_step: self.u_max_check_every_step }),
            ..Default::default()
        }
    }

    fn weight(&self, m: usize) -> MatrixField {
        let r = self.r;
        Arc::new(move |_, _| DMatrix::identity(m, m) * r)
    }

    fn general_params(&self) -> Result<CvstemParams, BenchmarkError> {
        Ok(CvstemParams::new(self.alpha, self.alpha_g, self.c)?.with_nu_max(self.nu_max))
    }

    fn lagrangian_params(&self, k_lower: f64) -> Result<LagrangianParams, BenchmarkError> {
        let mut p = LagrangianParams::new(self.alpha, self.alpha_g, 1.0)?.with_nu_max(self.nu_max);
        p.c2_override = None;
        p.c2_offset = self.c;
        p.k_lower = k_lower;
        p.validate()?;
        Ok(p)
    }
}

fn scale_noise(mut sde: SdeDefinition, s: f64) -> SdeDefinition {
    if s != 1.0 {
        let g = sde.diffusion.clone();
        sde.diffusion = Arc::new(move |x, t| g(x, t) * s);
    }
    sde
}

fn scale_lagrangian_noise(mut system: LagrangianSystem, s: f64) -> LagrangianSystem {
    if s != 1.0 {
        let g = system.noise.clone();
        system.noise = Arc::new(move |x, t| g(x, t) * s);
    }
    system
}

/// Everything needed for one closed-loop run.
pub struct Experiment {
    pub sde: SdeDefinition,
    pub controller: Box<dyn Controller>,
    pub reference: SharedReference,
    pub x0: DVector<f64>,
}

pub fn build_experiment(cfg: &BenchmarkConfig, seed: u64) -> Result<Experiment, BenchmarkError> {
    cfg.validate()?;
    let backend = || Box::new(InteriorPointSolver::default());
    let g = &cfg.gains;
    let unsupported = || BenchmarkError::Config(format!("controller {} is not available on {:?}", cfg.controller.as_str(), cfg.benchmark));
    match cfg.benchmark {
        BenchmarkKind::Attitude => {
            let mut params = cfg.attitude.clone();
            params.noise *= cfg.noise_scale;
            let plant = attitude_system(&params);
            let controller: Box<dyn Controller> = match cfg.controller {
                ControllerKind::Cvstem => Box::new(CvstemController::new(
                    plant.sde.clone(),
                    plant.sdc,
                    cfg.weight(3),
                    cfg.general_params()?,
                    cfg.settings(),
                    backend(),
                )),
                ControllerKind::Pid => Box::new(PidController::new(3, g.k_p, g.k_i, g.k_d, cfg.u_max)),
                ControllerKind::Nominal => Box::new(NominalController {
                    system: plant.system.clone(),
                    gains: LagrangianGains::constant(DMatrix::identity(3, 3) * g.lambda, DMatrix::identity(3, 3) * g.k_1),
                }),
            };
            Ok(Experiment { sde: plant.sde, controller, reference: plant.reference, x0: plant.x0 })
        }
        BenchmarkKind::Formation => {
            let mut params = cfg.formation.clone();
            params.noise *= cfg.noise_scale;
            let plant = formation_system(&params)?;
            let gains = formation_gains(params.agents, g.lambda, g.k_1, g.k_2);
            let n = 3 * params.agents;
            let controller: Box<dyn Controller> = match cfg.controller {
                ControllerKind::Cvstem => Box::new(LagrangianCvstemController::new(
                    plant.system.clone(),
                    gains,
                    cfg.weight(n),
                    cfg.lagrangian_params(g.k_1)?,
                    cfg.settings(),
                    backend(),
                )),
                ControllerKind::Pid => Box::new(PidController::new(n, g.k_p, g.k_i, g.k_d, cfg.u_max)),
                ControllerKind::Nominal => Box::new(NominalController { system: plant.system.clone(), gains }),
            };
            Ok(Experiment { sde: plant.sde, controller, reference: plant.reference, x0: formation_initial_state(&params, seed) })
        }
        BenchmarkKind::Scalar => {
            let (a, noise) = BenchmarkConfig::SCALAR_PLANT;
            let (sde, sdc, reference) = scalar_system(a, noise);
            let sde = scale_noise(sde, cfg.noise_scale);
            let controller: Box<dyn Controller> = match cfg.controller {
                ControllerKind::Cvstem => {
                    Box::new(CvstemController::new(sde.clone(), sdc, cfg.weight(1), cfg.general_params()?, cfg.settings(), backend()))
                }
                _ => return Err(unsupported()),
            };
            Ok(Experiment { sde, controller, reference, x0: DVector::from_element(1, 1.0) })
        }
        BenchmarkKind::Pendulum => {
            let (system, reference) = pendulum_system(BenchmarkConfig::PENDULUM_NOISE);
            let system = scale_lagrangian_noise(system, cfg.noise_scale);
            let gains = LagrangianGains::constant(DMatrix::identity(1, 1) * g.lambda, DMatrix::identity(1, 1) * g.k_1);
            let controller: Box<dyn Controller> = match cfg.controller {
                ControllerKind::Cvstem => Box::new(LagrangianCvstemController::new(
                    system.clone(),
                    gains,
                    cfg.weight(1),
                    cfg.lagrangian_params(g.k_1)?,
                    cfg.settings(),
                    backend(),
                )),
                ControllerKind::Pid => Box::new(PidController::new(1, g.k_p, g.k_i, g.k_d, cfg.u_max)),
                ControllerKind::Nominal => Box::new(NominalController { system: system.clone(), gains }),
            };
            Ok(Experiment { sde: system.to_sde(), controller, reference, x0: DVector::from_vec(vec![1.0, 0.0]) })
        }
    }
}

/// Builds and simulates one run with noise seed `seed`.
pub fn run_benchmark(cfg: &BenchmarkConfig, seed: u64) -> Result<TrajectoryRecord, BenchmarkError> {
    let mut exp = build_experiment(cfg, seed)?;
    Ok(simulate_closed_loop(&exp.sde, exp.controller.as_mut(), exp.reference.as_ref(), &exp.x0, &cfg.sim_config(seed))?)
}

/// Steady-state window used in summaries.
pub const STEADY_STATE_WINDOW: usize = 150;

/// Per-run scalar outcomes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steady_state_error: f64,
    pub control_effort: f64,
    pub max_input_norm: f64,
    pub solves: usize,
    pub failed_solves: usize,
}

impl RunSummary {
    pub fn from_record(rec: &TrajectoryRecord) -> Self {
        Self {
            seed: rec.seed,
            steady_state_error: rec.steady_state_error(STEADY_STATE_WINDOW),
            control_effort: rec.control_effort(),
            max_input_norm: rec.max_input_norm(),
            solves: rec.solve_log.iter().filter(|e| e.resolved).count(),
            failed_solves: rec.solve_log.iter().filter(|e| e.resolved && !e.accepted).count(),
        }
    }
}

/// Relative metric spread above which the constant-metric bound constants no longer apply.
pub const CONSTANT_METRIC_TOL: f64 = 1e-6;

/// Compares a CV-STEM ensemble of the scalar or pendulum benchmark against its
/// mean-squared error bound: the tracking bound for the scalar plant and the
/// composite-state bound for the pendulum. Both use zero metric-gradient
/// constants, so the report fails when the metric moved during the runs.
pub fn bound_report(cfg: &BenchmarkConfig, records: &[TrajectoryRecord], z: f64, max_violation: f64) -> Result<BoundReport, BenchmarkError> {
    if cfg.controller != ControllerKind::Cvstem {
        return Err(BenchmarkError::Config("bound reports need the cvstem controller".into()));
    }
    if records.is_empty() {
        return Err(BenchmarkError::Config("no runs to compare".into()));
    }
    let ext = RunExtremes::from_records(records)?;
    let spread = (ext.upper - ext.lower) / ext.upper;
    let v0 = records.iter().map(|r| r.diagnostics[0].lyapunov.unwrap_or(f64::NAN)).sum::<f64>() / records.len() as f64;
    let (name, constants, series, bound) = match cfg.benchmark {
        BenchmarkKind::Scalar => {
            let c = TrackingConstants {
                alpha: cfg.alpha,
                m_lower: ext.lower,
                m_upper: ext.upper,
                m_x: 0.0,
                m_xx: 0.0,
                g_u: BenchmarkConfig::SCALAR_PLANT.1 * cfg.noise_scale,
                eps: 1.0,
            };
            let series = crate::sim::monte_carlo_mse(records)?;
            let bound = series.times.iter().map(|&t| tracking_mse_bound(&c, v0, t)).collect::<Result<Vec<_>, _>>()?;
            ("tracking", serde_json::to_value(c).unwrap_or_default(), series, bound)
        }
        BenchmarkKind::Pendulum => {
            let p = LagrangianBoundInputs {
                alpha_ell: cfg.alpha,
                k_lower: cfg.gains.k_1,
                g_b: BenchmarkConfig::PENDULUM_NOISE * cfg.noise_scale,
                l_x: 0.0,
                eps_ell: 1.0,
                sup_lambda_max: ext.upper,
                inf_lambda_min: ext.lower,
            };
            let per_run: Vec<Vec<f64>> =
                records.iter().map(|r| r.diagnostics.iter().map(|d| d.internal_error_sq.unwrap_or(f64::NAN)).collect()).collect();
            let series = crate::sim::EnsembleSeries::from_series(&records[0].times, &per_run)?;
            let bound = series.times.iter().map(|&t| lagrangian_mse_bound(&p, v0, t)).collect::<Result<Vec<_>, _>>()?;
            ("composite", serde_json::to_value(p).unwrap_or_default(), series, bound)
        }
        other => return Err(BenchmarkError::Config(format!("no bound constants for the {other:?} benchmark"))),
    };
    let mut report = BoundReport::compare(name, constants, &series, bound, z, max_violation)?;
    if let serde_json::Value::Object(map) = &mut report.constants {
        map.insert("v0".into(), v0.into());
        map.insert("metric_spread".into(), spread.into());
    }
    report.passed &= spread < CONSTANT_METRIC_TOL && v0.is_finite();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attitude_constants() {
        let plant = attitude_system(&AttitudeParams::default());
        assert_eq!(plant.x0.as_slice(), &[0.9, -0.9, 0.7, 0.6, 0.7, -0.5]);
        let x = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.4, 0.1, -0.3]);
        let g = (plant.sde.diffusion)(&x, 0.0);
        let expect = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.2, 0.2, 0.2]);
        assert!((g.column(0) - expect).norm() < 1e-12);
        let r = plant.reference.at(0.0);
        assert!((r.x_d.rows(0, 3) - DVector::from_vec(vec![0.0, 0.1, 0.0])).norm() < 1e-15);
    }

    #[test]
    fn shadow_set_preserves_attitude() {
        let x = attitude_initial_state();
        let s = mrp_shadow(&x);
        let q = x.rows(0, 3).into_owned();
        let qs = s.rows(0, 3).into_owned();
        assert!(qs.norm() < 1.0);
        // Both parameter sets give the same rotation: R(q) = R(q_s).
        let rot = |q: &DVector<f64>| {
            let qq = q.dot(q);
            let sx = skew(q.as_slice());
            DMatrix::identity(3, 3) + (&sx * &sx * 8.0 - &sx * (4.0 * (1.0 - qq))) / (1.0 + qq).powi(2)
        };
        assert!((rot(&q) - rot(&qs)).norm() < 1e-12);
        // The rate maps as the derivative of the switch.
        let h = 1e-6;
        let qd = x.rows(3, 3).into_owned();
        let fwd = mrp_shadow(&stack(&(&q + &qd * h), &qd)).rows(0, 3).into_owned();
        let fd = (fwd - &qs) / h;
        assert!((fd - s.rows(3, 3)).norm() < 1e-4);
    }

    #[test]
    fn formation_constants() {
        let p = FormationParams::default();
        let plant = formation_system(&p).unwrap();
        let g = (plant.system.noise)(&DVector::zeros(30), 0.0);
        assert_eq!(g.shape(), (15, 1));
        assert!(g.iter().all(|&v| v == 1.0));
        for t in [0.0, 3.3, 17.0] {
            let r = plant.reference.at(t);
            assert!(((r.x_d[0].powi(2) + r.x_d[1].powi(2)).sqrt() - 2.0).abs() < 1e-12);
        }
        for seed in 0..20 {
            let x0 = formation_initial_state(&p, seed);
            assert!(x0.rows(0, 15).iter().all(|v| v.abs() <= 0.2));
            assert!(x0.rows(15, 15).iter().all(|&v| v == 0.0));
        }
        assert!(formation_system(&FormationParams { agents: 1, ..p }).is_err());
    }

    #[test]
    fn pid_examples() {
        let z = DVector::zeros(1);
        let k = |v| DMatrix::from_element(1, 1, v);
        assert_eq!(pid_control(&k(2.0), &k(1.0), &k(1.0), &z, &z, &z)[0], 0.0);
        assert_eq!(pid_control(&k(2.0), &k(0.0), &k(0.0), &DVector::from_element(1, 1.0), &z, &z)[0], -2.0);
    }

    #[test]
    fn pid_integral_is_clamped() {
        let mut pid = PidController::new(1, 0.0, 1.0, 0.0, Some(1.0));
        let r = ReferencePoint { x_d: DVector::zeros(2), x_d_dot: DVector::zeros(2) };
        let x = DVector::from_vec(vec![100.0, 0.0]);
        let mut u = DVector::zeros(1);
        for k in 0..100 {
            u = pid.control(k as f64, &x, &r).unwrap().u;
        }
        assert!((u[0] + 10.0).abs() < 1e-12);
    }

    #[test]
    fn ring_laplacian_rows_sum_to_zero() {
        let l = ring_laplacian(5);
        for i in 0..5 {
            assert_eq!(l.row(i).sum(), 0.0);
            assert_eq!(l[(i, i)], 2.0);
        }
    }

    #[test]
    fn config_rejects_unknown_controller() {
        let mut v = serde_json::to_value(BenchmarkConfig::attitude(ControllerKind::Pid)).unwrap();
        v["controller"] = serde_json::json!("hinf");
        let err = serde_json::from_value::<BenchmarkConfig>(v).unwrap_err().to_string();
        assert!(err.contains("hinf"), "{err}");
    }
}
