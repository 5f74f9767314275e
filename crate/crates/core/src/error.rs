use thiserror::Error;

/// Errors raised by the numerical engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not symmetric: entry ({row}, {col}) differs from its transpose")]
    NotSymmetric { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported dimension {0}")]
    UnsupportedDimension(usize),

    #[error("invalid volatility band: {0}")]
    InvalidBand(String),

    #[error("optimizer did not converge after {iterations} iterations (achieved tolerance {achieved:e})")]
    NotConverged { iterations: usize, achieved: f64 },

    #[error("epsilon {0} outside (0, 1]")]
    EpsilonOutOfRange(f64),

    #[error("CFL condition violated: dt = {dt:e} exceeds dx^2 / a_upper = {limit:e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid payoff: {0}")]
    InvalidPayoff(String),

    #[error("payoff parse error at offset {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("{0} monitoring times requested; at most 3 are supported")]
    TooManyMonitoringTimes(usize),

    #[error("invalid control: {0}")]
    InvalidControl(String),

    #[error("time {0} is not a node of the simulation grid")]
    MisalignedTime(f64),

    #[error("misaligned samples: {0}")]
    Misaligned(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
