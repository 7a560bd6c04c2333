use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch for {operand}: expected {expected}, got {actual:?}")]
    Shape {
        operand: &'static str,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; call reset_grads() first")]
    BackwardAlreadyRun,
    #[error("function is not deterministic: two evaluations at the same point gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged in epoch {epoch}: {message}")]
    Diverged {
        epoch: u32,
        message: String,
        /// Model as of the last completed epoch.
        last_good: Box<crate::checkpoint::Checkpoint>,
    },
    #[error("invalid backbone config at layer {index}: {message}")]
    Backbone { index: usize, message: String },
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Idx(#[from] crate::data::IdxError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(operand: &'static str, expected: impl Into<String>, actual: &[usize]) -> Self {
        Error::Shape {
            operand,
            expected: expected.into(),
            actual: actual.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
