use thiserror::Error;

/// Errors raised by the pricing, simulation and configuration layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point (t={t}, x={x}, z={z}) lies outside the impact domain")]
    DomainViolation { t: f64, x: f64, z: f64 },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("singular tridiagonal system: pivot {pivot:e} at row {row}")]
    SingularSystem { row: usize, pivot: f64 },

    #[error("abscissae must be strictly increasing (violated at index {index})")]
    UnsortedInput { index: usize },

    #[error("gamma bound is not finite at node {index}")]
    NonFiniteGamma { index: usize },

    #[error("policy iteration did not converge at step {step} (update {residual:e})")]
    PolicyNonConvergence { step: usize, residual: f64 },

    #[error("explicit scheme violates CFL: dt={dt:e} exceeds limit {limit:e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("hypothesis violated: {0}")]
    HypothesisViolation(String),

    #[error("generator is not convex in gamma: {0}")]
    NonConvexModel(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
