use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Several configuration fields failed validation at once.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    ConfigFields(Vec<String>),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// The empirical estimator is undefined, e.g. a class with positive prior has no samples.
    #[error("estimator undefined: {0}")]
    EstimatorUndefined(String),

    #[error("input is inconsistent with the uniform complementary assumption: {0}")]
    NotUniformComplementary(String),

    #[error("binary loss `{name}` violates s(z) + s(-z) = 1 at z = {z} (deviation {deviation:e})")]
    AsymmetricBinaryLoss { name: String, z: f64, deviation: f64 },

    #[error("malformed IDX file {path}: {reason}")]
    Idx { path: PathBuf, reason: String },

    #[error("malformed CSV input {path} (line {line}): {reason}")]
    Csv { path: PathBuf, line: u64, reason: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
