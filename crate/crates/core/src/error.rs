use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied something malformed: wrong shape, label out of range,
    /// empty batch, invalid hyperparameter.
    #[error("invalid input: {0}")]
    Input(String),

    /// A loss or gradient stopped being finite.
    #[error("numerical error in {context}: {detail}")]
    Numerical { context: String, detail: String },

    /// Sampling was requested from an empty episodic memory.
    #[error("episodic memory is empty")]
    EmptyMemory,

    /// A run finished but broke one of the properties it is checked for.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
