use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // The io error is part of the message rather than a chained source so
    // that reports walking the chain do not print it twice.
    #[error("io error on {path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),

    #[error("duplicate candidate {0:?}")]
    DuplicateCandidate(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence for {0:?} contains an unknown token")]
    UnknownTokenInCorpus(String),

    #[error("prefix is not a path in the trie")]
    InvalidPrefix,

    #[error("no complete candidate within max_len {0}")]
    NoCompleteCandidate(usize),

    #[error("unknown document {0:?}")]
    UnknownDocument(String),

    #[error("empty index")]
    EmptyIndex,

    #[error("bad index file: {0}")]
    IndexFormat(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("vocabulary size mismatch: tokenizer has {tokenizer}, language model has {model}")]
    VocabMismatch { tokenizer: usize, model: usize },

    #[error(transparent)]
    Lm(#[from] crate::lm::LmError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }

    /// True for errors caused by bad input data or files, as opposed to
    /// failures of the model backend at runtime.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Lm(_))
    }
}
