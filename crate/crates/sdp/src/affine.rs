//! Matrix-valued expressions that are affine in the flat decision vector.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

/// `constant + sum_i y_i * terms[i]`, with `y` the flat decision vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMatrix {
    pub constant: DMatrix<f64>,
    pub terms: BTreeMap<usize, DMatrix<f64>>,
}

impl AffineMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self::constant(DMatrix::zeros(nrows, ncols))
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        Self { constant: m, terms: BTreeMap::new() }
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(DMatrix::identity(n, n))
    }

    /// `coeff * y[var]`.
    pub fn term(var: usize, coeff: DMatrix<f64>) -> Self {
        let mut out = Self::zeros(coeff.nrows(), coeff.ncols());
        out.terms.insert(var, coeff);
        out
    }

    pub fn nrows(&self) -> usize {
        self.constant.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.constant.ncols()
    }

    fn assert_same_shape(&self, other: &Self) {
        assert_eq!(
            (self.nrows(), self.ncols()),
            (other.nrows(), other.ncols()),
            "affine expression shape mismatch"
        );
    }

    pub fn add_term(&mut self, var: usize, coeff: &DMatrix<f64>) {
        match self.terms.get_mut(&var) {
            Some(existing) => *existing += coeff,
            None => {
                self.terms.insert(var, coeff.clone());
            }
        }
    }

    pub fn plus(&self, other: &Self) -> Self {
        self.assert_same_shape(other);
        let mut out = self.clone();
        out.constant += &other.constant;
        for (&v, c) in &other.terms {
            out.add_term(v, c);
        }
        out
    }

    pub fn minus(&self, other: &Self) -> Self {
        self.plus(&other.scaled(-1.0))
    }

    pub fn plus_constant(&self, m: &DMatrix<f64>) -> Self {
        let mut out = self.clone();
        out.constant += m;
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|m| m * s)
    }

    /// `a * self`
    pub fn left_mul(&self, a: &DMatrix<f64>) -> Self {
        self.map(|m| a * m)
    }

    /// `self * b`
    pub fn right_mul(&self, b: &DMatrix<f64>) -> Self {
        self.map(|m| m * b)
    }

    pub fn transpose(&self) -> Self {
        self.map(|m| m.transpose())
    }

    /// `self + self^T`
    pub fn sym_sum(&self) -> Self {
        self.plus(&self.transpose())
    }

    fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Self {
        Self {
            constant: f(&self.constant),
            terms: self.terms.iter().map(|(&v, m)| (v, f(m))).collect(),
        }
    }

    /// Assembles a block matrix; every row of blocks must have consistent shapes.
    pub fn blocks(rows: &[Vec<AffineMatrix>]) -> Self {
        let heights: Vec<usize> = rows.iter().map(|r| r[0].nrows()).collect();
        let widths: Vec<usize> = rows[0].iter().map(|b| b.ncols()).collect();
        let (h, w) = (heights.iter().sum(), widths.iter().sum());
        let mut out = Self::zeros(h, w);
        let mut r0 = 0;
        for (bi, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), widths.len(), "ragged block row");
            let mut c0 = 0;
            for (bj, blk) in row.iter().enumerate() {
                assert_eq!((blk.nrows(), blk.ncols()), (heights[bi], widths[bj]), "block shape mismatch");
                out.constant.view_mut((r0, c0), (heights[bi], widths[bj])).copy_from(&blk.constant);
                for (&v, m) in &blk.terms {
                    let slot = out.terms.entry(v).or_insert_with(|| DMatrix::zeros(h, w));
                    slot.view_mut((r0, c0), (heights[bi], widths[bj])).copy_from(m);
                }
                c0 += widths[bj];
            }
            r0 += heights[bi];
        }
        out
    }

    pub fn evaluate(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for (&v, m) in &self.terms {
            out += m * y[v];
        }
        out
    }

    /// Drops coefficient matrices that are identically zero.
    pub fn prune(&mut self) {
        self.terms.retain(|_, m| m.iter().any(|&x| x != 0.0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_place_terms_and_constants() {
        let a = AffineMatrix::term(0, DMatrix::from_element(1, 1, 2.0));
        let b = AffineMatrix::constant(DMatrix::from_element(1, 1, 3.0));
        let m = AffineMatrix::blocks(&[vec![a.clone(), b.clone()], vec![b, a]]);
        let v = m.evaluate(&DVector::from_vec(vec![5.0]));
        assert_eq!(v, DMatrix::from_row_slice(2, 2, &[10.0, 3.0, 3.0, 10.0]));
    }

    #[test]
    fn left_and_right_products_commute_with_evaluation() {
        let x = AffineMatrix::term(1, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 0.0]))
            .plus_constant(&DMatrix::identity(2, 2));
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -3.0, 4.0]);
        let y = DVector::from_vec(vec![0.0, -1.5]);
        let lhs = x.left_mul(&a).plus(&x.right_mul(&a.transpose())).evaluate(&y);
        let xv = x.evaluate(&y);
        assert!((lhs - (&a * &xv + &xv * a.transpose())).norm() < 1e-14);
    }
}
