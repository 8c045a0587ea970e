use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate curve: {0}")]
    Degenerate(String),
    #[error("singular map: {0}")]
    Singular(String),
    #[error("offset |v| = {v} exceeds the neighborhood scale {delta}")]
    OutsideNeighborhood { v: f64, delta: f64 },
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("s-box is not dyadic: {0}")]
    NonDyadic(String),
    #[error("annulus not applicable: {0}")]
    NotApplicable(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("coordinate mismatch: {0}")]
    CoordinateMismatch(String),
    #[error("cost guard: {0}")]
    CostGuard(String),
    #[error("empty input: {0}")]
    Empty(String),
}

pub type Result<T> = std::result::Result<T, Error>;
