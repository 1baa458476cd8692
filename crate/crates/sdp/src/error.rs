use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("objective is unbounded below on the feasible set")]
    Unbounded,
    #[error("numerical failure: {0}")]
    Numerical(String),
}
