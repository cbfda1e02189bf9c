//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the attack pipeline, metrics, and data handling.
#[derive(Debug, Error)]
pub enum Error {
    /// Input tensor or vector violates a precondition (non-finite values,
    /// shape mismatch, wrong channel count).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Class label outside `[0, k)`.
    #[error("invalid label {label} for {k} classes")]
    InvalidLabel { label: usize, k: usize },

    /// Label encoding carries no optimization signal (all weights zero).
    #[error("invalid encoding: {0}")]
    InvalidEncoding(String),

    /// Target-set specification cannot be satisfied (e.g. m >= k).
    #[error("invalid target spec: {0}")]
    InvalidSpec(String),

    /// A metric is undefined on the given records (empty input, zero successes).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Experiment configuration failed validation; all violations listed.
    #[error("invalid config:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    /// Dataset acquisition or parsing failure (checksum mismatch, missing
    /// cache, malformed archive).
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss; diagnostics attached.
    #[error("training diverged at step {step}: {diagnostics}")]
    Diverged { step: u64, diagnostics: String },

    /// Checkpoint is incompatible with the requested configuration.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Serialization failure.
    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
