use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown subject `{name}`; valid subjects: {valid}")]
    UnknownSubject { name: String, valid: String },

    #[error("unknown executable `{0}`")]
    UnknownExecutable(String),

    #[error("arithmetic overflow in `{exec}` for input {input}")]
    Overflow { exec: String, input: String },

    #[error("invalid profile `{id}`: {reason}")]
    InvalidProfile { id: String, reason: String },

    #[error("event for `{exec}` is missing dimension `{dim}`")]
    MissingDimension { exec: String, dim: String },

    #[error("event for `{exec}` has unexpected dimension `{dim}`")]
    UnexpectedDimension { exec: String, dim: String },

    #[error("ragged lists in event for `{exec}`: `{dim}` has length {len}, expected {expected}")]
    RaggedLists {
        exec: String,
        dim: String,
        len: usize,
        expected: usize,
    },

    #[error("{path}:{line}: malformed trace line: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("dataset `{exec}` has {rows} rows, at least {min} required")]
    TooFewRows { exec: String, rows: usize, min: usize },

    #[error("dataset `{0}` has no non-constant columns")]
    AllColumnsConstant(String),

    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("non-finite value during {0}")]
    NonFinite(String),

    #[error("training diverged for `{exec}` at epoch {epoch}: {detail}")]
    Diverged {
        exec: String,
        epoch: usize,
        detail: String,
    },

    #[error("invalid condition: {0}")]
    InvalidCondition(String),

    #[error("model file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt model file: {0}")]
    Corrupt(String),

    #[error("{0}")]
    Empty(String),

    #[error("{what} not found (expected {path})")]
    Missing { what: String, path: PathBuf },

    #[error("inconsistent report: {0}")]
    Inconsistent(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end:
    /// 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::UnknownSubject { .. }
            | Error::UnknownExecutable(_)
            | Error::Empty(_) => 1,
            Error::NonFinite(_) | Error::Diverged { .. } | Error::InvalidCondition(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
