use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Shape descriptor used in dimension errors.
pub type Shape = (usize, usize);

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{op}: backward called before forward")]
    BackwardBeforeForward { op: &'static str },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("csv error in {path}: {reason}")]
    Csv { path: PathBuf, reason: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: Shape, rhs: Shape) -> Self {
        Error::Dimension { op, lhs, rhs }
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => 2,
            Error::NonFinite(_) | Error::Diverged { .. } => 3,
            Error::Format { .. } | Error::Csv { .. } => 4,
            Error::Dimension { .. } | Error::BackwardBeforeForward { .. } => 3,
            Error::Io(_) => 1,
        }
    }
}
