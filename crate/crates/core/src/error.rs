use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the domain of a special function or kernel.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    /// Cholesky of K_PP failed even after jitter escalation.
    #[error("singular kernel matrix (jitter escalated to {jitter:e}); near-duplicate inducing points: {pairs:?}")]
    SingularKernel {
        jitter: f64,
        pairs: Vec<(usize, usize)>,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    /// Training produced a non-finite objective.
    #[error("training aborted at epoch {epoch}: objective is {value}")]
    NonFiniteObjective {
        epoch: usize,
        value: f64,
        snapshot: Box<crate::model::VariationalParams>,
    },

    #[error("kernel cache is stale; rebuild it after changing hyperparameters or inducing inputs")]
    StaleCache,

    #[error("{path}:{line}: {msg}")]
    Ingestion {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn ingestion(path: impl Into<PathBuf>, line: u64, msg: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Ingestion error not tied to a particular line.
    pub fn ingestion_msg(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Self::ingestion(path, 0, msg)
    }

    /// True for failures caused by malformed input files.
    pub fn is_ingestion(&self) -> bool {
        matches!(
            self,
            Error::Ingestion { .. } | Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Input(_)
        )
    }
}
