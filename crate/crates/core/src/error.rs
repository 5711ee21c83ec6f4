use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value in layer `{layer}`: {detail}")]
    Numeric { layer: String, detail: String },

    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("unknown dataset `{name}`{}", suggestion_suffix(.suggestions))]
    Lookup {
        name: String,
        suggestions: Vec<String>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("statistical test undefined: {0}")]
    UndefinedTest(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn suggestion_suffix(suggestions: &[String]) -> String {
    if suggestions.is_empty() {
        String::new()
    } else {
        format!("; did you mean: {}?", suggestions.join(", "))
    }
}

/// Failures specific to reading a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a GRU-FCN checkpoint (bad magic bytes)")]
    BadMagic,

    #[error("checkpoint header is not valid: {0}")]
    Header(String),

    #[error("checkpoint payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("checkpoint manifest disagrees with its config: {0}")]
    ManifestMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
