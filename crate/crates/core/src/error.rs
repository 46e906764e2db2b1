//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for all tracker components.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Channel count is not divisible by the requested group count.
    #[error("group error: channels {channels} not divisible by groups {groups}")]
    Group { channels: usize, groups: usize },

    /// Operation expected a scalar (or tensor of a specific rank).
    #[error("rank error: {0}")]
    Rank(String),

    /// A genome failed validation (wrong length or gene out of range).
    #[error("genome error: {0}")]
    Genome(String),

    /// Malformed serialized input (genome string, checkpoint, manifest...).
    #[error("parse error: {0}")]
    Parse(String),

    /// Language encoding failure (e.g. empty token sequence).
    #[error("encoding error: {0}")]
    Encoding(String),

    /// Metric computation over invalid input (empty series, length mismatch).
    #[error("metric error: {0}")]
    Metric(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint/genome incompatibility when loading parameters.
    #[error("load error: parameter `{name}`: {reason}")]
    Load { name: String, reason: String },

    /// An output artifact already exists with different content.
    #[error("conflict error: {0}")]
    Conflict(String),

    /// Loss diverged or a forward produced non-finite values.
    #[error("numeric abort: {0}")]
    Numeric(String),

    /// Risk-gap probe precondition violation (schedule fingerprints differ).
    #[error("probe error: {0}")]
    Probe(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 0 success, 2 usage, 3 config,
    /// 4 data conflict, 5 numeric abort, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Probe(_) => 3,
            Error::Conflict(_) => 4,
            Error::Numeric(_) => 5,
            _ => 1,
        }
    }
}
