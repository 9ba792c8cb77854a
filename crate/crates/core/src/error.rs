//! Crate-wide error type.
//!
//! Each variant maps onto one machine-parseable CLI error category, so the
//! binary can report `error[<category>]: <message>` and exit with a distinct
//! status per category.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: {0}")]
    Train(String),

    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Short category slug used by the CLI for machine-parseable reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) => "nonfinite",
            Error::Io { .. } => "io",
            Error::Checkpoint(_) => "checkpoint",
            Error::Train(_) => "train",
            Error::Eval(_) => "eval",
        }
    }

    /// Process exit code for the CLI; stable per category, all nonzero.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Shape { .. } => 4,
            Error::NonFinite(_) => 5,
            Error::Io { .. } => 6,
            Error::Checkpoint(_) => 7,
            Error::Train(_) => 8,
            Error::Eval(_) => 9,
        }
    }
}
