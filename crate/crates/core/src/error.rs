use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside valid domain [{start}, {end}]")]
    Domain { t: f64, start: f64, end: f64 },

    #[error("index {index} out of range (valid: 0..{len})")]
    Index { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("rank-deficient system: {0}")]
    Rank(String),

    #[error("point behind camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("no convergence: {0}")]
    NonConvergence(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("empty problem: {0}")]
    EmptyProblem(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
