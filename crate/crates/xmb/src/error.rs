//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch in a tensor primitive; names the op and offending axes.
    #[error("shape error in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Out-of-range token id or index.
    #[error("index error in `{op}`: {detail}")]
    Index { op: &'static str, detail: String },

    /// Non-finite values or other numeric breakdown.
    #[error("numeric error in `{op}`: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// API contract violation (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Sequence does not fit the model context window.
    #[error("context overflow: {0}")]
    Length(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Non-ASCII or otherwise untokenizable text.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// Training diverged; carries the last finite loss observed.
    #[error("training diverged (last finite loss {last_loss})")]
    Training { last_loss: f32 },

    /// Guardrail recipe finished but missed its quality bar.
    #[error("training failed: {0}")]
    TrainingFailed(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    /// Scorer failed on a specific text.
    #[error("scorer error on text #{index}: {detail}")]
    Scorer { index: usize, detail: String },

    /// Network-level failure talking to an external scorer.
    #[error("transport error: {0}")]
    Transport(String),

    /// External scorer answered with a malformed or incomplete payload.
    #[error("protocol error: {0}")]
    Protocol(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code per the CLI contract: 1 usage/input, 2 numeric/training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } | Error::Training { .. } | Error::TrainingFailed(_) => 2,
            _ => 1,
        }
    }
}
