//! Small dense linear-algebra helpers shared by the modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `(lambda_min, lambda_max)` of the symmetric part of `m`.
pub fn eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let e = SymmetricEigen::new(sym(m)).eigenvalues;
    (e.min(), e.max())
}

pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    eig_extremes(m).0
}

pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    eig_extremes(m).1
}

/// Condition number of a symmetric positive definite matrix.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let (lo, hi) = eig_extremes(m);
    hi / lo
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Moore-Penrose pseudo-inverse with a relative singular-value cutoff.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let top = svd.singular_values.max();
    let eps = 1e-12 * top.max(f64::MIN_POSITIVE) * (m.nrows().max(m.ncols()) as f64);
    svd.pseudo_inverse(eps).expect("SVD computed with both factors")
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = nalgebra::Cholesky::new(sym(m))?.inverse();
    Some(sym(&inv))
}

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Skew-symmetric cross-product matrix of a 3-vector.
pub fn skew(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0])
}
