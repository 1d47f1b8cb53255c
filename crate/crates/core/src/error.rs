use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("entity {id} ({kind}) is already registered")]
    DuplicateEntity { kind: &'static str, id: String },

    #[error("entity {id} ({kind}) is not registered")]
    UnknownEntity { kind: &'static str, id: String },

    /// No state exists for one side of a prediction request. Callers
    /// usually fall back to a global-mean prediction.
    #[error("cold entity: {kind} {id} has no state")]
    ColdEntity { kind: &'static str, id: String },

    #[error("time regression for {entity}: {now} is before last recorded {last}")]
    TimeRegression { entity: String, last: i64, now: i64 },

    #[error("events are not sorted by timestamp (index {index})")]
    Unsorted { index: usize },

    #[error("causality violation: {0}")]
    Causality(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {malformed} of {total} lines malformed (first at line {first_line})")]
    Malformed {
        path: PathBuf,
        malformed: usize,
        total: usize,
        first_line: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
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
