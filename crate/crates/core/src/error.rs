use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty vector")]
    EmptyVector,
    #[error("non-finite objective")]
    NonFiniteObjective,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("out-of-vocabulary id {0}")]
    OutOfVocabulary(u32),
    #[error("wrong head: {0}")]
    WrongHead(&'static str),
    #[error("empty segment")]
    EmptySegment,
    #[error("no positive label")]
    NoPositive,
    #[error("lemma requires single-document examples")]
    LemmaRequiresSingleDoc,
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("encoding failed for document {doc_id}: {source}")]
    Encoding {
        doc_id: u32,
        #[source]
        source: Box<Error>,
    },
    #[error("unknown document id {0}")]
    UnknownDocument(u32),
    #[error("missing judgment for query {0}")]
    MissingJudgment(u32),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format version {0}")]
    FormatVersion(u32),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
