use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("not enough distinct pairs: requested {requested} {kind} trials, only {available} available")]
    TrialCount {
        kind: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("unknown utterance id `{0}`")]
    UnknownUtterance(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Shape {
            what: what.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable tag used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::Input(_) => "input",
            Error::NonFinite(_) => "non_finite",
            Error::TrialCount { .. } => "trial_count",
            Error::UnknownUtterance(_) => "unknown_utterance",
            Error::Format { .. } => "format",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
