use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty caption")]
    EmptyCaption,
    #[error("caption has {len} tokens, limit is {max}")]
    CaptionTooLong { len: usize, max: usize },
    #[error("token index {index} out of vocabulary of size {vocab}")]
    OutOfVocabulary { index: usize, vocab: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("resolution mismatch: expected {expected}, got {actual}")]
    Resolution { expected: usize, actual: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    CorruptCheckpoint { offset: usize, reason: String },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {term}")]
    Diverged { epoch: usize, batch: usize, term: String },
    #[error("manifest invariant violated: {0}")]
    Manifest(String),
    #[error("cannot decode image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
