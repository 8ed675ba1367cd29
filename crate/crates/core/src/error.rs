use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two vectors that must share a length do not.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// A value lies outside the domain of the operation (zero probability
    /// under a log, non-finite input, out-of-range step).
    #[error("domain error: {0}")]
    Domain(String),
    /// Hyperparameters or run configuration are ill-posed.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller broke an operation's precondition (e.g. mixed-modality batch).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
