use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid sample value {0}")]
    InvalidSample(f64),

    #[error("value {value} outside of [-1, 1]")]
    Range { value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("enumeration budget exceeded: {configurations} configurations (limit {limit})")]
    Budget { configurations: f64, limit: usize },

    #[error("observation unreachable: best residual {residual} exceeds {bound}")]
    Unreachable { residual: f64, bound: f64 },

    #[error("singular Gram matrix: {0}")]
    SingularGram(String),

    #[error("divergence at level {level}, step {step}{}: {detail}", worker.map(|w| format!(", worker {w}")).unwrap_or_default())]
    Divergence {
        level: usize,
        step: usize,
        worker: Option<usize>,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 3,
            Error::Io(_) => 4,
            _ => 2,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.into())
        } else {
            Error::Config(e.to_string())
        }
    }
}
