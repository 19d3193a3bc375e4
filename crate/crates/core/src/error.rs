use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("token id {token} is outside the vocabulary of {vocab_size}")]
    VocabOverflow { token: usize, vocab_size: usize },

    #[error("text has {len} tokens, more than the maximum of {max}")]
    TextTooLong { len: usize, max: usize },

    #[error("contrastive term {0} has no negatives")]
    EmptyNegatives(usize),

    #[error("{0} is disabled in this configuration")]
    DisabledFeature(&'static str),

    #[error("batch of {0} is too small; contrastive negatives need at least 2 samples")]
    BatchTooSmall(usize),

    #[error("nothing to evaluate")]
    EmptyEvaluation,

    #[error("scene generation failed: {0}")]
    InfeasibleSpec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
