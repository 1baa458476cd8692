//! Dense infeasible-start primal-dual interior-point method (HKM direction,
//! Mehrotra predictor-corrector) for LMI-form semidefinite programs.
//!
//! The user problem `min c'y : F_j(y) = F_j0 + sum_k y_k G_jk ⪰ 0, E y = f` is
//! handled as the dual of
//! `min -<F0, X> : <G_k, X> = c_k, X ⪰ 0` after the equalities are removed by
//! a null-space parametrization `y = y0 + N z`. Infeasibility of the LMI is
//! reported when the primal iterate becomes an improving ray.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::SdpError;
use crate::problem::SdpProblem;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    Inaccurate,
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub status: SdpStatus,
    /// Flat decision vector (meaningless when `status == Infeasible`).
    pub y: DVector<f64>,
    pub objective: f64,
    pub relative_gap: f64,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    pub iterations: usize,
    /// Smallest eigenvalue of every block at `y`, in block order.
    pub min_eigenvalues: Vec<f64>,
    pub equality_residual: f64,
    pub solve_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub feasibility_tol: f64,
    pub gap_tol: f64,
    pub max_iterations: usize,
    /// Fraction of the distance to the cone boundary taken per step.
    pub step_fraction: f64,
    /// Normalized ray residual below which infeasibility/unboundedness is declared.
    pub certificate_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { feasibility_tol: 1e-7, gap_tol: 1e-7, max_iterations: 120, step_fraction: 0.98, certificate_tol: 1e-8 }
    }
}

/// A solver able to handle [`SdpProblem`]s. One solve at a time per handle.
pub trait SdpBackend: Send {
    fn name(&self) -> &'static str;
    fn solve(&mut self, problem: &SdpProblem) -> Result<SdpSolution, SdpError>;
}

/// The reference backend.
#[derive(Clone, Debug, Default)]
pub struct InteriorPointSolver {
    pub settings: SolverSettings,
}

impl InteriorPointSolver {
    pub fn new(settings: SolverSettings) -> Self {
        Self { settings }
    }
}

impl SdpBackend for InteriorPointSolver {
    fn name(&self) -> &'static str {
        "dense-hkm-primal-dual"
    }

    fn solve(&mut self, problem: &SdpProblem) -> Result<SdpSolution, SdpError> {
        solve_with(problem, &self.settings)
    }
}

struct Block {
    dim: usize,
    f0: DMatrix<f64>,
    terms: Vec<(usize, DMatrix<f64>)>,
}

/// The problem in reduced, column-scaled coordinates `z`: `y = y0 + N diag(d) z`.
struct Reduced {
    nz: usize,
    blocks: Vec<Block>,
    cost: DVector<f64>,
    y0: DVector<f64>,
    basis: Option<DMatrix<f64>>,
    colscale: DVector<f64>,
}

impl Reduced {
    fn lift(&self, z: &DVector<f64>) -> DVector<f64> {
        let zs = z.component_mul(&self.colscale);
        match &self.basis {
            None => zs,
            Some(n) => &self.y0 + n * zs,
        }
    }
}

fn reduce(problem: &SdpProblem, tol: f64) -> Result<Reduced, SdpError> {
    let p = problem.num_coords;
    let cost_full = problem.objective_vector();
    let (nz, y0, basis, mut blocks, cost) = if problem.equalities.is_empty() {
        let blocks: Vec<Block> = problem
            .blocks
            .iter()
            .map(|b| Block {
                dim: b.dim(),
                f0: b.expr.constant.clone(),
                terms: b.expr.terms.iter().map(|(&k, m)| (k, m.clone())).collect(),
            })
            .collect();
        (p, DVector::zeros(p), None, blocks, cost_full)
    } else {
        let q = problem.equalities.len();
        let mut e = DMatrix::zeros(q, p);
        let mut f = DVector::zeros(q);
        for (r, eq) in problem.equalities.iter().enumerate() {
            for &(k, v) in &eq.coeffs {
                if k >= p {
                    return Err(SdpError::InvalidProblem(format!(
                        "equality '{}' references unknown coordinate {k}",
                        eq.tag
                    )));
                }
                e[(r, k)] += v;
            }
            let scale = e.row(r).norm();
            if scale == 0.0 {
                if eq.rhs.abs() > tol {
                    return Err(SdpError::InvalidProblem(format!("equality '{}' has no coefficients", eq.tag)));
                }
                continue;
            }
            for k in 0..p {
                e[(r, k)] /= scale;
            }
            f[r] = eq.rhs / scale;
        }
        let y0 = e
            .clone()
            .svd(true, true)
            .solve(&f, 1e-12)
            .map_err(|msg| SdpError::Numerical(format!("equality least squares failed: {msg}")))?;
        let resid = (&e * &y0 - &f).amax();
        if resid > 1e3 * tol {
            return Err(SdpError::InvalidProblem(format!("equalities are inconsistent (residual {resid:.3e})")));
        }
        let eig: SymmetricEigen<f64, Dyn> = SymmetricEigen::new(e.transpose() * &e);
        let top: f64 = eig.eigenvalues.amax().max(1.0);
        let null_idx: Vec<usize> = (0..p).filter(|&i| eig.eigenvalues[i] <= 1e-12 * top).collect();
        let nz = null_idx.len();
        let basis = DMatrix::from_fn(p, nz, |i, j| eig.eigenvectors[(i, null_idx[j])]);
        let blocks = problem
            .blocks
            .iter()
            .map(|b| {
                let dim = b.dim();
                let mut f0 = b.expr.constant.clone();
                let mut terms: Vec<DMatrix<f64>> = vec![DMatrix::zeros(dim, dim); nz];
                for (&k, m) in &b.expr.terms {
                    f0 += m * y0[k];
                    for (j, t) in terms.iter_mut().enumerate() {
                        let w = basis[(k, j)];
                        if w != 0.0 {
                            *t += m * w;
                        }
                    }
                }
                let cutoff = 1e-13 * terms.iter().map(|m| m.amax()).fold(0.0, f64::max);
                let terms = terms.into_iter().enumerate().filter(|(_, m)| m.amax() > cutoff).collect();
                Block { dim, f0, terms }
            })
            .collect();
        let cost = basis.transpose() * cost_full;
        (nz, y0, Some(basis), blocks, cost)
    };

    let mut norms = DVector::<f64>::zeros(nz);
    for b in &blocks {
        for (k, m) in &b.terms {
            norms[*k] += m.norm_squared();
        }
    }
    for k in 0..nz {
        if norms[k] == 0.0 && cost[k].abs() > 0.0 {
            return Err(SdpError::Unbounded);
        }
    }
    let colscale = norms.map(|n| if n > 0.0 { 1.0 / n.sqrt() } else { 1.0 });
    for b in &mut blocks {
        for (k, m) in &mut b.terms {
            *m *= colscale[*k];
        }
    }
    let cost = cost.component_mul(&colscale);
    Ok(Reduced { nz, blocks, cost, y0, basis, colscale })
}

fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Largest `alpha <= 1/fraction` with `x + alpha dx ⪰ 0`, given `x ≻ 0`.
fn max_step(x: &DMatrix<f64>, dx: &DMatrix<f64>) -> f64 {
    let Some(ch) = Cholesky::new(x.clone()) else { return 0.0 };
    let l = ch.l();
    let Some(a) = l.solve_lower_triangular(dx) else { return 0.0 };
    let Some(w) = l.solve_lower_triangular(&a.transpose()) else { return 0.0 };
    let lmin = SymmetricEigen::new(sym(w)).eigenvalues.min();
    if lmin < 0.0 { -1.0 / lmin } else { f64::INFINITY }
}

struct Iterate {
    x: Vec<DMatrix<f64>>,
    s: Vec<DMatrix<f64>>,
    z: DVector<f64>,
}

struct Residuals {
    rp: DVector<f64>,
    rd: Vec<DMatrix<f64>>,
    primal_obj: f64,
    dual_obj: f64,
    mu: f64,
}

fn residuals(red: &Reduced, it: &Iterate, n_total: f64) -> Residuals {
    let mut rp = red.cost.clone();
    let mut rd = Vec::with_capacity(red.blocks.len());
    let mut primal_obj = 0.0;
    let mut xs = 0.0;
    for (j, b) in red.blocks.iter().enumerate() {
        let mut f = b.f0.clone();
        for (k, g) in &b.terms {
            rp[*k] -= inner(g, &it.x[j]);
            f += g * it.z[*k];
        }
        primal_obj += inner(&b.f0, &it.x[j]);
        xs += inner(&it.x[j], &it.s[j]);
        rd.push(f - &it.s[j]);
    }
    Residuals { rp, rd, primal_obj, dual_obj: red.cost.dot(&it.z), mu: xs / n_total }
}

struct Direction {
    dx: Vec<DMatrix<f64>>,
    ds: Vec<DMatrix<f64>>,
    dz: DVector<f64>,
}

struct Factorized {
    schur: Cholesky<f64, Dyn>,
    s_inv: Vec<DMatrix<f64>>,
}

fn factorize(red: &Reduced, it: &Iterate) -> Option<Factorized> {
    let mut m = DMatrix::<f64>::zeros(red.nz, red.nz);
    let mut s_inv = Vec::with_capacity(red.blocks.len());
    for (j, b) in red.blocks.iter().enumerate() {
        let ls = Cholesky::new(it.s[j].clone())?;
        let lx = Cholesky::new(it.x[j].clone())?.l();
        let l = ls.l();
        let k2 = b.dim * b.dim;
        let mut rows = DMatrix::zeros(b.terms.len(), k2);
        for (a, (_, g)) in b.terms.iter().enumerate() {
            let pk = l.solve_lower_triangular(&(g * &lx))?;
            rows.row_mut(a).copy_from(&DVector::from_column_slice(pk.as_slice()).transpose());
        }
        let gram = &rows * rows.transpose();
        for (a, (ka, _)) in b.terms.iter().enumerate() {
            for (c, (kc, _)) in b.terms.iter().enumerate() {
                m[(*ka, *kc)] += gram[(a, c)];
            }
        }
        s_inv.push(sym(ls.inverse()));
    }
    let d = DVector::from_fn(red.nz, |i, _| {
        let v = m[(i, i)];
        if v > 0.0 && v.is_finite() { 1.0 / v.sqrt() } else { 1.0 }
    });
    let mut ms = DMatrix::from_fn(red.nz, red.nz, |i, j| d[i] * m[(i, j)] * d[j]);
    for ridge in [0.0, 1e-14, 1e-12, 1e-10] {
        if ridge > 0.0 {
            for i in 0..red.nz {
                ms[(i, i)] += ridge;
            }
        }
        if let Some(ch) = Cholesky::new(ms.clone()) {
            // Fold the equilibration back in: M = D^-1 (D M D) D^-1.
            let l = DMatrix::from_diagonal(&d.map(|v| 1.0 / v)) * ch.l();
            let schur = Cholesky::pack_dirty(l);
            return Some(Factorized { schur, s_inv });
        }
    }
    None
}

/// Solves the Newton system for a given complementarity target `rc_j`
/// (the right side of `ΔX + X ΔS S^-1 = rc`).
fn direction(red: &Reduced, it: &Iterate, res: &Residuals, fac: &Factorized, rc: &[DMatrix<f64>]) -> Direction {
    let mut rhs = -res.rp.clone();
    let mut q_blocks = Vec::with_capacity(red.blocks.len());
    for (j, b) in red.blocks.iter().enumerate() {
        let q = sym(&rc[j] - &it.x[j] * &res.rd[j] * &fac.s_inv[j]);
        for (k, g) in &b.terms {
            rhs[*k] += inner(g, &q);
        }
        q_blocks.push(q);
    }
    let dz = fac.schur.solve(&rhs);
    let mut dx = Vec::with_capacity(red.blocks.len());
    let mut ds = Vec::with_capacity(red.blocks.len());
    for (j, b) in red.blocks.iter().enumerate() {
        let mut dsj = res.rd[j].clone();
        for (k, g) in &b.terms {
            dsj += g * dz[*k];
        }
        let dxj = sym(&rc[j] - &it.x[j] * &dsj * &fac.s_inv[j]);
        dx.push(dxj);
        ds.push(dsj);
    }
    Direction { dx, ds, dz }
}

fn step_lengths(it: &Iterate, d: &Direction) -> (f64, f64) {
    let ap = it.x.iter().zip(&d.dx).map(|(x, dx)| max_step(x, dx)).fold(f64::INFINITY, f64::min);
    let ad = it.s.iter().zip(&d.ds).map(|(s, ds)| max_step(s, ds)).fold(f64::INFINITY, f64::min);
    (ap, ad)
}

fn min_eigs(problem: &SdpProblem, y: &DVector<f64>) -> Vec<f64> {
    problem.blocks.iter().map(|b| SymmetricEigen::new(b.expr.evaluate(y)).eigenvalues.min()).collect()
}

fn equality_residual(problem: &SdpProblem, y: &DVector<f64>) -> f64 {
    problem
        .equalities
        .iter()
        .map(|eq| (eq.coeffs.iter().map(|&(k, v)| v * y[k]).sum::<f64>() - eq.rhs).abs())
        .fold(0.0, f64::max)
}

pub fn solve_with(problem: &SdpProblem, settings: &SolverSettings) -> Result<SdpSolution, SdpError> {
    let started = Instant::now();
    if problem.blocks.is_empty() {
        return Err(SdpError::InvalidProblem("no PSD blocks".into()));
    }
    let red = reduce(problem, settings.feasibility_tol)?;
    let n_total: f64 = red.blocks.iter().map(|b| b.dim as f64).sum();
    let f0_norm = red.blocks.iter().map(|b| b.f0.norm_squared()).sum::<f64>().sqrt();
    let c_norm = red.cost.norm();

    let xi = red.cost.iter().map(|c| 1.0 + c.abs()).fold(10f64.max(n_total.sqrt()), f64::max);
    let eta = 10f64.max(n_total.sqrt()).max(f0_norm).max(1.0);
    let mut it = Iterate {
        x: red.blocks.iter().map(|b| DMatrix::identity(b.dim, b.dim) * xi).collect(),
        s: red.blocks.iter().map(|b| DMatrix::identity(b.dim, b.dim) * eta).collect(),
        z: DVector::zeros(red.nz),
    };

    let finish = |status, z: &DVector<f64>, res: &Residuals, iterations| {
        let y = red.lift(z);
        let (pinf, dinf, gap) = measures(res, c_norm, f0_norm);
        SdpSolution {
            status,
            objective: problem.objective_value(&y),
            min_eigenvalues: min_eigs(problem, &y),
            equality_residual: equality_residual(problem, &y),
            relative_gap: gap,
            primal_infeasibility: pinf,
            dual_infeasibility: dinf,
            y,
            iterations,
            solve_seconds: started.elapsed().as_secs_f64(),
        }
    };

    let mut last_good: Option<(DVector<f64>, f64)> = None;
    for iter in 0..settings.max_iterations {
        let res = residuals(&red, &it, n_total);
        let (pinf, dinf, gap) = measures(&res, c_norm, f0_norm);
        if pinf <= settings.feasibility_tol && dinf <= settings.feasibility_tol && gap <= settings.gap_tol {
            return Ok(finish(SdpStatus::Optimal, &it.z, &res, iter));
        }
        if pinf.max(dinf).max(gap) <= 1e-5 {
            last_good = Some((it.z.clone(), pinf.max(dinf).max(gap)));
        }

        // Improving ray for the primal: the LMI has no feasible point.
        if res.primal_obj < 0.0 {
            let ray = (&red.cost - &res.rp).norm() / (-res.primal_obj);
            if ray < settings.certificate_tol {
                return Ok(finish(SdpStatus::Infeasible, &DVector::zeros(red.nz), &res, iter));
            }
        }
        // Improving ray for the LMI: the objective is unbounded below.
        if res.dual_obj < 0.0 {
            let rd_f0: f64 = red
                .blocks
                .iter()
                .zip(&res.rd)
                .map(|(b, r)| (&b.f0 - r).norm_squared())
                .sum::<f64>()
                .sqrt();
            if rd_f0 / (-res.dual_obj) < settings.certificate_tol {
                return Err(SdpError::Unbounded);
            }
        }

        let Some(fac) = factorize(&red, &it) else {
            break;
        };
        let rc_aff: Vec<DMatrix<f64>> = it.x.iter().map(|x| -x).collect();
        let aff = direction(&red, &it, &res, &fac, &rc_aff);
        let (ap, ad) = step_lengths(&it, &aff);
        let (ap, ad) = (ap.min(1.0), ad.min(1.0));
        let mut mu_aff = 0.0;
        for j in 0..red.blocks.len() {
            mu_aff += inner(&(&it.x[j] + &aff.dx[j] * ap), &(&it.s[j] + &aff.ds[j] * ad));
        }
        mu_aff /= n_total;
        let sigma = (mu_aff / res.mu).clamp(0.0, 1.0).powi(3);
        let rc: Vec<DMatrix<f64>> = (0..red.blocks.len())
            .map(|j| &fac.s_inv[j] * (sigma * res.mu) - &it.x[j] - &aff.dx[j] * &aff.ds[j] * &fac.s_inv[j])
            .collect();
        let dir = direction(&red, &it, &res, &fac, &rc);
        let (ap, ad) = step_lengths(&it, &dir);
        let ap = (settings.step_fraction * ap).min(1.0);
        let ad = (settings.step_fraction * ad).min(1.0);
        if !(ap.is_finite() && ad.is_finite()) || ap.max(ad) < 1e-12 {
            break;
        }
        for j in 0..red.blocks.len() {
            it.x[j] += &dir.dx[j] * ap;
            it.s[j] += &dir.ds[j] * ad;
        }
        it.z += &dir.dz * ad;
    }

    let res = residuals(&red, &it, n_total);
    let (pinf, dinf, gap) = measures(&res, c_norm, f0_norm);
    let worst = pinf.max(dinf).max(gap);
    match last_good {
        Some((z, best)) if best < worst => Ok(finish(SdpStatus::Inaccurate, &z, &residuals_at(&red, &it, &z, n_total), settings.max_iterations)),
        _ if worst <= 1e-5 => Ok(finish(SdpStatus::Inaccurate, &it.z, &res, settings.max_iterations)),
        _ => Err(SdpError::Numerical(format!(
            "no convergence: primal {pinf:.2e}, dual {dinf:.2e}, gap {gap:.2e}"
        ))),
    }
}

fn residuals_at(red: &Reduced, it: &Iterate, z: &DVector<f64>, n_total: f64) -> Residuals {
    let probe = Iterate { x: it.x.clone(), s: it.s.clone(), z: z.clone() };
    residuals(red, &probe, n_total)
}

fn measures(res: &Residuals, c_norm: f64, f0_norm: f64) -> (f64, f64, f64) {
    let pinf = res.rp.norm() / (1.0 + c_norm);
    let dinf = res.rd.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt() / (1.0 + f0_norm);
    // Our objective is c'z; the primal one is -<F0, X>.
    let gap = (res.dual_obj + res.primal_obj).abs() / (1.0 + res.dual_obj.abs() + res.primal_obj.abs());
    (pinf, dinf, gap)
}
