//! Dense semidefinite programming for small control-synthesis problems.
//!
//! Problems are written in LMI form: a flat decision vector `y` built from
//! named scalar and symmetric-matrix variables, PSD constraints affine in `y`,
//! optional linear equalities and a linear objective. [`InteriorPointSolver`] is the
//! bundled backend; other solvers plug in through [`SdpBackend`].

pub mod affine;
pub mod ipm;
mod error;
pub mod problem;

pub use affine::AffineMatrix;
pub use ipm::{solve_with, InteriorPointSolver, SdpBackend, SdpSolution, SdpStatus, SolverSettings};
pub use error::SdpError;
pub use problem::{LinearEquality, PsdBlock, ScalarVar, SdpProblem, SymVar, Triplet, Variable, VariableKind};
