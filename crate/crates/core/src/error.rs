use std::path::PathBuf;
use std::time::Duration;

/// Errors produced anywhere in the augmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("utterance contains a TAB and cannot be written as TSV (line {line}); use jsonl")]
    TabInUtterance { line: usize },

    #[error("no candidate utterance outside conversation {exclude:?}")]
    NoCandidate { exclude: String },

    #[error("conversation {id:?} has {turns} turn(s); {strategy} needs at least {needed}")]
    NotGarblable {
        id: String,
        strategy: &'static str,
        turns: usize,
        needed: usize,
    },

    #[error("training error: {0}")]
    Training(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty response cannot be scored")]
    EmptyResponse,

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("external language model timed out after {0:?}")]
    ExternalTimeout(Duration),

    #[error("external language model sent a malformed response: {0}")]
    ExternalMalformed(String),

    #[error("external language model process failed: {0}")]
    ExternalProcess(String),

    #[error("k={k} is outside 1..={n}")]
    RankOutOfRange { k: usize, n: usize },

    #[error("context {id:?} has {found} candidates, expected {expected}")]
    CandidateCount {
        id: String,
        found: usize,
        expected: usize,
    },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
