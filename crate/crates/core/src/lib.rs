//! Optimal contraction metrics for stochastic nonlinear and Lagrangian systems.
//!
//! The pipeline: an SDC factorization of the drift ([`sdc`]) feeds a
//! per-step convex program whose solution is a contraction metric
//! ([`program`]); the metric defines a feedback law ([`controller`]) that is
//! exercised in Euler-Maruyama closed-loop simulation ([`sim`]); the resulting
//! ensembles are compared against analytic mean-squared error bounds
//! ([`analysis`]). [`benchmarks`] holds the spacecraft attitude and formation
//! plants, a PID baseline and small test systems.

pub mod analysis;
pub mod benchmarks;
pub mod controller;
pub mod linalg;
pub mod program;
pub mod sdc;
pub mod sim;

pub use cvstem_sdp as sdp;
