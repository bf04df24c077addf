use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the filtering toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ensemble of size {got} is too small, at least {need} members are required")]
    InsufficientEnsemble { got: usize, need: usize },

    #[error("covariance is not factorizable even after jitter escalation")]
    SingularCovariance,

    #[error("all log-weights are -inf, the mixture has degenerated")]
    DegenerateWeights,

    #[error("range Jacobian is undefined at the range center")]
    SingularJacobian,

    #[error("map is not invertible: {0}")]
    NonInvertible(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("every grid-search cell diverged")]
    SearchFailed,

    #[error("unsupported model file format {0:?}")]
    UnsupportedFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
