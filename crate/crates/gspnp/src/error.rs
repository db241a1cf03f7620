//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {context} ({left} vs {right})")]
    DimensionMismatch {
        context: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("kernel ({krows}x{kcols}) larger than image grid ({height}x{width})")]
    KernelTooLarge {
        krows: usize,
        kcols: usize,
        width: usize,
        height: usize,
    },

    #[error("mask is not binary: sample {value} at index {index}")]
    NonBinaryMask { index: usize, value: f64 },

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("unsupported channel count {0} (expected 1 or 3)")]
    UnsupportedChannels(usize),

    #[error("backtracking exceeded {max_shrinks} shrinks at stepsize {tau:.3e}; prior gradient is likely broken")]
    BacktrackStalled { max_shrinks: usize, tau: f64 },

    #[error("training diverged at step {step}: loss is not finite")]
    TrainingDiverged {
        step: usize,
        history: Vec<crate::training::TrainRecord>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::MalformedFile {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
