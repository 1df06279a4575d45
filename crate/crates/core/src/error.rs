//! Shared error type for the core crate.
//!
//! Every fallible operation in the crate returns [`CoreError`] so callers
//! (tests, the CLI) can match on the failure class instead of parsing
//! strings. The CLI maps these onto process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// A tensor operation received operands whose shapes do not compose.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An argument was outside its documented domain (negative size,
    /// alpha outside [0,1], even kernel, ...).
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// A gradient was requested for a parameter the tape never saw.
    #[error("no gradient recorded for parameter '{name}'")]
    MissingGradient { name: String },

    /// Checkpoint bytes failed validation (bad magic, truncation,
    /// unknown dtype, shape table inconsistent with the payload).
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// A checkpoint parsed cleanly but does not describe the expected model.
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    /// A dataset file (IDX images/labels) is malformed or inconsistent.
    #[error("bad dataset: {0}")]
    BadData(String),

    /// Filesystem failure while reading or writing data/checkpoints.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A batch was requested from a buffer that holds no samples.
    #[error("rehearsal buffer is empty")]
    EmptyBuffer,

    /// Training produced a non-finite loss or non-finite parameters.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A permutation does not cover, or does not fit, the model's
    /// permutation groups.
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
