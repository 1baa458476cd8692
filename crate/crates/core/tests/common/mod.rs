//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use cvstem::linalg::{lambda_max, lambda_min};
use cvstem::program::*;
use cvstem::sdp::{InteriorPointSolver, SdpStatus};
use cvstem::controller::ClfCondition;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn m1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

pub fn solver() -> InteriorPointSolver {
    InteriorPointSolver::default()
}

pub fn scalar_point(a: f64) -> PointData {
    PointData::new(m1(a), m1(1.0), m1(1.0), m1(0.0)).unwrap()
}

pub fn double_integrator() -> PointData {
    PointData::new(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        m1(1.0),
        DMatrix::zeros(2, 2),
    )
    .unwrap()
}

/// Optimal value, with infeasible programs at `+inf`.
pub fn optimum(sol: &MetricSolution) -> f64 {
    if sol.status == SdpStatus::Infeasible {
        f64::INFINITY
    } else {
        sol.tau
    }
}

pub fn solve_general(point: &PointData, params: &CvstemParams) -> MetricSolution {
    let prog = assemble_general_program(point, &MetricRate::Zero, params).unwrap();
    solve(&prog, &mut solver()).unwrap()
}

pub fn solve_lagrangian(point: &LagrangianPoint, params: &LagrangianParams) -> MetricSolution {
    let prog = assemble_lagrangian_program(point, &MetricRate::Zero, RateConvention::AsPrinted, params).unwrap();
    solve(&prog, &mut solver()).unwrap()
}

/// Brute force over `W = s R(theta) diag(1, k) R(theta)^T` (or scalar `w`),
/// checking the metric-form conditions by eigenvalues.
/// Keeps `lambda_max(M) <= nu_max`, the same domain as the convex program.
pub struct GridOracle<'a> {
    pub riccati: &'a dyn Fn(&DMatrix<f64>, f64) -> bool,
    pub contraction: &'a dyn Fn(&DMatrix<f64>, f64) -> bool,
    pub c: f64,
    pub nu_max: f64,
    pub gamma_max: f64,
}

impl GridOracle<'_> {
    /// The Riccati condition only gets harder and the contraction condition
    /// only easier as `gamma` grows, so the feasible `gamma` set is an
    /// interval; its ends are located by bisection on the eigenvalue tests.
    pub fn any_gamma(&self, m: &DMatrix<f64>) -> bool {
        let (riccati, contraction) = (&self.riccati, &self.contraction);
        if !riccati(m, 0.0) {
            return false;
        }
        if contraction(m, 0.0) {
            return true;
        }
        let (mut lo, mut hi) = (0.0, self.gamma_max);
        if !contraction(m, hi) {
            return false;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if contraction(m, mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        riccati(m, hi)
    }

    pub fn objective(&self, w: &DMatrix<f64>) -> f64 {
        let (lo, hi) = (lambda_min(w), lambda_max(w));
        hi / lo + self.c * (hi / lo).powi(2) * lo
    }

    pub fn scalar(&self, w_max: f64) -> f64 {
        let mut best = f64::INFINITY;
        for i in 1..=2000 {
            let w = w_max * i as f64 / 2000.0;
            if w < 1.0 / self.nu_max {
                continue;
            }
            if self.any_gamma(&m1(1.0 / w)) {
                best = best.min(self.objective(&m1(w)));
            }
        }
        best
    }

    pub fn planar(&self) -> f64 {
        let eval = |s: f64, k: f64, th: f64| -> Option<f64> {
            if s < 1.0 / self.nu_max || k < 1.0 {
                return None;
            }
            let (c, sn) = (th.cos(), th.sin());
            let q = DMatrix::from_row_slice(2, 2, &[c, -sn, sn, c]);
            let w = &q * DMatrix::from_diagonal(&DVector::from_vec(vec![s, s * k])) * q.transpose();
            let m = w.clone().try_inverse()?;
            self.any_gamma(&m).then(|| self.objective(&w))
        };
        // coarse pass over log-spaced scale and ratio, then local refinement
        let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
        for i in 0..=40 {
            let s = (1.0 / self.nu_max) * 10f64.powf(3.0 * i as f64 / 40.0);
            for j in 0..=40 {
                let k = 10f64.powf(3.0 * j as f64 / 40.0);
                for t in 0..36 {
                    let th = std::f64::consts::PI * t as f64 / 36.0;
                    if let Some(v) = eval(s, k, th) {
                        if v < best.0 {
                            best = (v, s, k, th);
                        }
                    }
                }
            }
        }
        let (mut ds, mut dk, mut dt) = (best.1, best.2, 0.1);
        for _ in 0..12 {
            let (_, s0, k0, t0) = best;
            for i in -5..=5 {
                for j in -5..=5 {
                    for t in -5..=5 {
                        let (s, k, th) = (s0 + ds * i as f64 / 5.0, k0 + dk * j as f64 / 5.0, t0 + dt * t as f64 / 5.0);
                        if let Some(v) = eval(s, k, th) {
                            if v < best.0 {
                                best = (v, s, k, th);
                            }
                        }
                    }
                }
            }
            ds *= 0.5;
            dk *= 0.5;
            dt *= 0.5;
        }
        best.0
    }
}

pub type Check<'a> = Box<dyn Fn(&DMatrix<f64>, f64) -> bool + 'a>;

pub fn general_checks<'a>(point: &'a PointData, params: &'a CvstemParams) -> (Check<'a>, Check<'a>) {
    (
        Box::new(move |m, gamma| lambda_max(&general_riccati_lhs(m, gamma, point, &DMatrix::zeros(m.nrows(), m.nrows()))) <= 0.0),
        Box::new(move |m, gamma| lambda_min(&general_contraction_lhs(m, gamma, point, params)) >= 0.0),
    )
}

pub fn lagrangian_checks<'a>(point: &'a LagrangianPoint, params: &'a LagrangianParams) -> (Check<'a>, Check<'a>) {
    (
        Box::new(move |m, gamma| lambda_max(&lagrangian_riccati_lhs(m, gamma, point, &DMatrix::zeros(m.nrows(), m.nrows()))) <= 0.0),
        Box::new(move |m, gamma| lambda_min(&lagrangian_contraction_lhs(m, gamma, point, params)) >= 0.0),
    )
}

pub fn one_dof() -> LagrangianPoint {
    LagrangianPoint::new(m1(1.0), m1(0.0), m1(1.0), m1(1.0), m1(1.0)).unwrap()
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0) * spread);
    &a * a.transpose() + DMatrix::identity(n, n) * rng.random_range(1e-3..1.0)
}

// V(a, b) for M(x) = 2 + sin x along the segment from b to a.
pub fn pair_v(a: f64, b: f64) -> f64 {
    let d = a - b;
    2.0 * d * d + d * (b.cos() - a.cos())
}

pub fn pair_drift(x: f64) -> f64 {
    -x - 0.5 * x.sin()
}

pub const G1: f64 = 0.6;
pub const G2: f64 = 0.4;

pub fn pair_generator(a: f64, b: f64) -> f64 {
    let d = a - b;
    let va = 4.0 * d + (b.cos() - a.cos()) + d * a.sin();
    let vb = -4.0 * d - (b.cos() - a.cos()) - d * b.sin();
    let vaa = 4.0 + 2.0 * a.sin() + d * a.cos();
    let vbb = 4.0 + 2.0 * b.sin() - d * b.cos();
    va * pair_drift(a) + vb * pair_drift(b) + 0.5 * (G1 * G1 * vaa + G2 * G2 * vbb)
}

pub fn clf_grid_oracle(cond: &ClfCondition, lower: &[f64], upper: &[f64], pts: usize) -> (DVector<f64>, f64) {
    let step: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| (u - l) / (pts - 1) as f64).collect();
    let mut best = (DVector::zeros(2), f64::INFINITY);
    for i in 0..pts {
        for j in 0..pts {
            let u = DVector::from_vec(vec![lower[0] + i as f64 * step[0], lower[1] + j as f64 * step[1]]);
            let viol = (cond.a + cond.g.dot(&u)).max(0.0);
            let cost = u.norm_squared() + viol * viol;
            if cost < best.1 {
                best = (u, cost);
            }
        }
    }
    best
}

