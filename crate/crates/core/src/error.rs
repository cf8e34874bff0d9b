use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: malformed row: {reason}", path.display())]
    MalformedRow {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{}:{line}: unknown label {value:?} (expected OFF or NOT)", path.display())]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        value: String,
    },

    #[error("{}:{line}: unknown sentiment {value:?} (expected negative, neutral or positive)", path.display())]
    UnknownSentiment {
        path: PathBuf,
        line: usize,
        value: String,
    },

    #[error("{}:{line}: duplicate id {id:?} (first seen on line {first_line})", path.display())]
    DuplicateId {
        path: PathBuf,
        id: String,
        first_line: usize,
        line: usize,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("instance {id:?} has no label")]
    UnlabeledInstance { id: String },

    #[error("instance {id:?} has no sentiment")]
    MissingSentiment { id: String },

    #[error("id {id:?} not found in {source_name}")]
    MissingId { id: String, source_name: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("training data must contain both OFF and NOT instances")]
    SingleClass,

    #[error("class {class} has zero instances")]
    ZeroClassCount { class: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{}: no usable embedding lines (skipped {skipped})", path.display())]
    NoEmbeddings { path: PathBuf, skipped: usize },

    #[error("{context}: {reason}")]
    Format { context: String, reason: String },

    #[error("test sets differ: {0}")]
    MismatchedRuns(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            reason: reason.into(),
        }
    }
}

/// Tags errors with the pipeline stage they came from.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
