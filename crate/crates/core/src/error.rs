use thiserror::Error;

/// Errors produced anywhere in the optimizer stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("matrix is not symmetric at ({row}, {col})")]
    Asymmetric { row: usize, col: usize },

    #[error("dimension must be at least 1")]
    EmptyDimension,

    #[error("symmetric eigensolver did not converge for a {dim}x{dim} matrix")]
    NoConvergence { dim: usize },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:e}, max {max_eig:e})")]
    NotPsd { min_eig: f64, max_eig: f64 },

    #[error("matrix is singular: every eigenvalue is at or below the floor")]
    Singular,

    #[error("ridge must be positive, got {0}")]
    InvalidRidge(f64),

    #[error("rank-one update is singular (denominator {0:e})")]
    SingularUpdate(f64),

    #[error("gradient matrix is rank deficient (eigenvalue ratio {ratio:e})")]
    RankDeficient { ratio: f64 },

    #[error("live epoch already holds {m} columns")]
    EpochOverflow { m: usize },

    #[error("cannot seal epoch with {have} of {m} columns")]
    SealTooEarly { have: usize, m: usize },

    #[error("history column cap of {cap} reached")]
    HistoryCap { cap: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("preconditioner is singular (zero perturbation and no history)")]
    SingularPreconditioner,

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("{n} instances cannot be split into {m} equal batches")]
    Divisibility { n: usize, m: usize },

    #[error("rejection gate exhausted after {attempts} attempts (best sigma_p {best:e}, threshold {threshold:e})")]
    GateExhausted { attempts: usize, best: f64, threshold: f64 },

    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("records are incompatible: {0}")]
    Incompatible(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
