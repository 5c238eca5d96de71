use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("invalid record {id:?}: {message}")]
    InvalidRecord { id: String, message: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unidiff parse error at byte {offset}: {message}")]
    DiffParse { offset: usize, message: String },

    #[error("hunk invariant violated: {0}")]
    HunkInvariant(String),

    #[error("git: {0}")]
    Git(String),

    #[error("diff {0:?} has no file changes")]
    NoFileChanges(String),

    #[error("training data contains a single class")]
    SingleClass,

    #[error("non-finite value in row {row}, feature {feature:?}")]
    NonFinite { row: usize, feature: String },

    #[error("missing feature {0:?}")]
    MissingFeature(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("no positive (SEV) examples")]
    NoPositives,

    #[error("model not aligned: p(\"0\") + p(\"1\") is zero")]
    NotAligned,

    #[error("input text already contains marker {0:?}")]
    MarkerCollision(&'static str),

    #[error("unknown zone {0:?}")]
    UnknownZone(String),

    #[error("unknown reason code {code:?}; valid codes: {}", valid.join(", "))]
    InvalidReasonCode { code: String, valid: Vec<String> },

    #[error("zero baseline capture")]
    ZeroBaseline,

    #[error("scored sets differ: {0}")]
    MismatchedTestSets(String),

    #[error("corpora overlap: {0}")]
    Overlap(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model file: {0}")]
    Model(String),

    #[error("provider: {0}")]
    Provider(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad input or usage rather than a violated
    /// model invariant. Drives the CLI exit code (2 vs 1).
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::MalformedLine { .. }
                | Error::DuplicateId(_)
                | Error::InvalidRecord { .. }
                | Error::InvalidConfig(_)
                | Error::DiffParse { .. }
                | Error::Git(_)
                | Error::MissingFeature(_)
                | Error::UnknownZone(_)
                | Error::InvalidReasonCode { .. }
                | Error::InvalidArgument(_)
                | Error::Model(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}
