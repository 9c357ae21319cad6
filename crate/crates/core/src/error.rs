use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("column {0} has zero norm")]
    ZeroColumn(usize),

    #[error("constraint matrix has rank {rank}, expected {n}")]
    RankDeficient { rank: usize, n: usize },

    #[error("constraint {0} is redundant over the box")]
    RedundantConstraint(usize),

    #[error("system is infeasible already over the box (constraint {index})")]
    ImmediateInfeasible { index: usize, lambda_bar: Vec<f64> },

    #[error("shape matrix A D A^T is singular or not positive definite")]
    SingularShape,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("candidate is not a certificate: {0}")]
    NotACertificate(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("too large for exact oracle: {0}")]
    TooLarge(String),

    #[error("bad generator spec: {0}")]
    BadSpec(String),

    #[error("certificate-index sequence is empty")]
    EmptySequence,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
