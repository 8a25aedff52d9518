use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid span ({start_s}, {end_s}): {reason}")]
    InvalidSpan {
        start_s: f64,
        end_s: f64,
        reason: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{context}: parse error at byte {offset}: {message}")]
    Parse {
        context: String,
        offset: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unknown item id `{0}`")]
    UnknownItem(String),

    #[error("unknown question id `{0}`")]
    UnknownQuestion(String),

    #[error("duplicate question id `{0}`")]
    DuplicateQuestion(String),

    #[error("missing prediction for question `{0}`")]
    MissingPrediction(String),

    #[error("choice index {index} out of range [0, 3] for question `{qid}`")]
    ChoiceOutOfRange { qid: String, index: i64 },

    #[error("question generation failed: {0}")]
    Generation(String),

    #[error("empty {0} set")]
    EmptySet(&'static str),

    #[error("non-finite {what}: {detail}")]
    NonFinite { what: String, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Stable, machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSpan { .. } => "invalid_span",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::UnknownItem(_) => "unknown_item",
            Error::UnknownQuestion(_) => "unknown_question",
            Error::DuplicateQuestion(_) => "duplicate_question",
            Error::MissingPrediction(_) => "missing_prediction",
            Error::ChoiceOutOfRange { .. } => "choice_out_of_range",
            Error::Generation(_) => "generation",
            Error::EmptySet(_) => "empty_set",
            Error::NonFinite { .. } => "non_finite",
            Error::Shape(_) => "shape",
            Error::Checkpoint(_) => "checkpoint",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
