use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the segmentation engine.
///
/// The variants map one-to-one onto the failure classes the CLI reports
/// through its exit codes (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or argument did not satisfy an operation's preconditions.
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// A configuration record violates its invariants.
    #[error("configuration error: {0}")]
    Config(String),

    /// Corpus files are missing, unreadable or malformed.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// The optimisation loop produced a non-finite value or could not proceed.
    #[error("training error: {0}")]
    Training(String),

    /// An evaluation quantity is undefined for the given data.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// A checkpoint file is corrupt or does not match the requested model.
    #[error("checkpoint error ({path}): {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 2 config, 3 ingestion,
    /// 4 training, 5 checkpoint.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Ingestion(_) | Error::Io { .. } | Error::Evaluation(_) => 3,
            Error::InvalidInput(_) | Error::Training(_) => 4,
            Error::Checkpoint { .. } => 5,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
