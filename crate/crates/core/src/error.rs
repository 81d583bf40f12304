use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {t} outside the admissible range {range}")]
    TimeOutOfRange { t: f64, range: &'static str },

    #[error("cost matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("brute-force EOT supports at most 8 points, got {0}")]
    TooManyPoints(usize),

    #[error("unknown atom type {0:?}")]
    UnknownElement(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("stale forward cache: {0}")]
    StaleCache(&'static str),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error("ODE solve exceeded the NFE budget of {max_nfe} at t = {t}")]
    NfeBudgetExceeded { max_nfe: usize, t: f64 },

    #[error("ODE state became non-finite at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
