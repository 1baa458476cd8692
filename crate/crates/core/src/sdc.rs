//! State-dependent-coefficient (SDC) factorizations `f(x,t) = A(x,t) x`,
//! their convex combinations, and the deviation Jacobian used by the
//! contraction-margin constraint.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::sim::{MatrixField, SdeDefinition};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdcError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Factors `A_i(x,t)` with simplex weights `rho`.
#[derive(Clone)]
pub struct SdcForm {
    pub factors: Vec<MatrixField>,
    pub weights: Vec<f64>,
}

impl SdcForm {
    pub fn single(factor: MatrixField) -> Self {
        Self { factors: vec![factor], weights: vec![1.0] }
    }

    pub fn new(factors: Vec<MatrixField>, weights: Vec<f64>) -> Result<Self, SdcError> {
        let sdc = Self { factors, weights };
        check_weights(&sdc.weights, sdc.factors.len())?;
        Ok(sdc)
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn factor_values(&self, x: &DVector<f64>, t: f64) -> Vec<DMatrix<f64>> {
        self.factors.iter().map(|a| a(x, t)).collect()
    }

    /// `sum_i rho_i A_i(x,t)` with the stored weights.
    pub fn combine(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>, SdcError> {
        combine(&self.factor_values(x, t), &self.weights)
    }
}

fn check_weights(w: &[f64], count: usize) -> Result<(), SdcError> {
    if w.len() != count || count == 0 {
        return Err(SdcError::InvalidArgument(format!("{} weights for {count} factors", w.len())));
    }
    if w.iter().any(|&v| v < -1e-12 || !v.is_finite()) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(SdcError::InvalidArgument("weights must lie on the probability simplex".into()));
    }
    Ok(())
}

pub fn combine(factors: &[DMatrix<f64>], weights: &[f64]) -> Result<DMatrix<f64>, SdcError> {
    check_weights(weights, factors.len())?;
    let shape = factors[0].shape();
    let mut out = DMatrix::zeros(shape.0, shape.1);
    for (a, &w) in factors.iter().zip(weights) {
        if a.shape() != shape {
            return Err(SdcError::InvalidArgument("factors have different shapes".into()));
        }
        out += a * w;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SdcValidation {
    /// Max over samples of `||A(rho,x,t) x - f(x,t)||`.
    pub max_residual: f64,
    /// Residual per sample point, in input order.
    pub residuals: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Samples `A(rho,x,t) x` against the drift. A point passes when the residual
/// is within `tol * (1 + ||f(x,t)||)`.
pub fn validate_sdc(sdc: &SdcForm, sde: &SdeDefinition, samples: &[(DVector<f64>, f64)], tol: f64) -> Result<SdcValidation, SdcError> {
    if samples.is_empty() {
        return Err(SdcError::InvalidArgument("no sample points".into()));
    }
    let mut residuals = Vec::with_capacity(samples.len());
    let mut passed = true;
    for (x, t) in samples {
        let a = sdc.combine(x, *t)?;
        if a.shape() != (sde.n, sde.n) || x.len() != sde.n {
            return Err(SdcError::InvalidArgument("factor or sample has the wrong dimension".into()));
        }
        let f = (sde.drift)(x, *t);
        let r = (a * x - &f).norm();
        passed &= r <= tol * (1.0 + f.norm());
        residuals.push(r);
    }
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    Ok(SdcValidation { max_residual, residuals, tolerance: tol, passed })
}

/// Latin-hypercube sample of `count` points in the box `[lo, hi]`.
pub fn latin_hypercube(lo: &DVector<f64>, hi: &DVector<f64>, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = lo.len();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut strata: Vec<usize> = (0..count).collect();
        strata.shuffle(&mut rng);
        cols.push(
            strata
                .into_iter()
                .map(|s| {
                    let u = (s as f64 + rng.random::<f64>()) / count as f64;
                    lo[i] + u * (hi[i] - lo[i])
                })
                .collect(),
        );
    }
    (0..count).map(|k| DVector::from_fn(n, |i, _| cols[i][k])).collect()
}

pub fn default_fd_step(y: &DVector<f64>) -> f64 {
    1e-6 * (1.0 + y.norm())
}

/// Central-difference Jacobian of `g` at `y`.
pub fn central_jacobian(g: &dyn Fn(&DVector<f64>) -> DVector<f64>, y: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let base = g(y);
    let mut jac = DMatrix::zeros(base.len(), y.len());
    for j in 0..y.len() {
        let mut yp = y.clone();
        let mut ym = y.clone();
        yp[j] += h;
        ym[j] -= h;
        jac.set_column(j, &((g(&yp) - g(&ym)) / (2.0 * h)));
    }
    jac
}

/// Jacobian `phi = d/dy [dA(rho,y,t) x_d + dB(y,t) u_d]` where
/// `dA(rho,y,t) = A(rho, x_d + y, t) - A(rho, x_d, t)` and likewise for `B`.
/// The `A(rho, x_d)` and `B(x_d)` parts are constant in `y` and drop out.
pub fn finite_difference_phi(
    factor: &dyn Fn(&DVector<f64>, f64) -> DMatrix<f64>,
    input_matrix: &dyn Fn(&DVector<f64>, f64) -> DMatrix<f64>,
    x_d: &DVector<f64>,
    u_d: &DVector<f64>,
    y: &DVector<f64>,
    t: f64,
    h: Option<f64>,
) -> DMatrix<f64> {
    let h = h.unwrap_or_else(|| default_fd_step(y));
    let g = |yy: &DVector<f64>| {
        let x = x_d + yy;
        factor(&x, t) * x_d + input_matrix(&x, t) * u_d
    };
    central_jacobian(&g, y, h)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Controllability {
    pub rank: usize,
    pub min_singular_value: f64,
}

/// Rank and smallest singular value (the n-th) of `[B, AB, ..., A^{n-1} B]`.
pub fn controllability_check(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Controllability {
    let n = a.nrows();
    let m = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * m);
    let mut blk = b.clone();
    for k in 0..n {
        ctrb.view_mut((0, k * m), (n, m)).copy_from(&blk);
        blk = a * blk;
    }
    let sv = ctrb.svd(false, false).singular_values;
    let top = sv.max();
    let tol = top.max(1.0) * 1e-10 * n as f64;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    let mut sorted: Vec<f64> = sv.iter().copied().collect();
    sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let min_singular_value = if sorted.len() >= n { sorted[n - 1] } else { 0.0 };
    Controllability { rank, min_singular_value }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combination_is_weighted_sum() {
        let a = combine(&[DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 2.0], &[0.3, 0.7]).unwrap();
        assert!((a - DMatrix::identity(2, 2) * 1.7).norm() < 1e-15);
    }

    #[test]
    fn weights_off_the_simplex_are_rejected() {
        assert!(combine(&[DMatrix::identity(1, 1)], &[0.9]).is_err());
        assert!(combine(&[DMatrix::identity(1, 1), DMatrix::identity(1, 1)], &[1.5, -0.5]).is_err());
    }

    #[test]
    fn kalman_rank_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(controllability_check(&a, &DMatrix::from_column_slice(2, 1, &[0.0, 1.0])).rank, 2);
        assert_eq!(controllability_check(&a, &DMatrix::zeros(2, 1)).rank, 0);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let c = controllability_check(&d, &DMatrix::from_column_slice(2, 1, &[1.0, 0.0]));
        assert_eq!(c.rank, 1);
        assert!(c.min_singular_value < 1e-12);
    }
}
