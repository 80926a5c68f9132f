use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("need at least {needed} events to build {needed} intervals, found {found}")]
    InsufficientEvents { needed: usize, found: usize },

    #[error("cannot place a strict cutpoint between event blocks {block} and {next}: tied event times")]
    DegeneratePartition { block: usize, next: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite or out-of-domain value: {0}")]
    Domain(String),

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("Newton-Raphson did not converge after {iterations} iterations (max |grad| = {max_grad:.3e})")]
    NoConvergence { iterations: usize, max_grad: f64 },

    #[error("calibration failed: {0}")]
    CalibrationFailure(String),

    #[error("simulation harness: {0}")]
    Harness(String),

    #[error("no external controls in input")]
    EmptyExternal,

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Config(_) | Error::InvalidInput(_) | Error::EmptyExternal | Error::Io(_) => 2,
            Error::CalibrationFailure(_) => 4,
            _ => 3,
        }
    }
}
