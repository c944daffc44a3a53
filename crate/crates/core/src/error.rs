use thiserror::Error;

/// Errors raised across the stack. Variants carry enough context to name the
/// offending input, step, or artifact.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    Shape {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("infeasible trajectory at step {step}: {reason}")]
    Infeasible { step: usize, reason: String },

    #[error("episode already terminated at step {0}")]
    Terminated(usize),

    #[error("unknown category id {id} (planner knows {count})")]
    UnknownCategory { id: usize, count: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
