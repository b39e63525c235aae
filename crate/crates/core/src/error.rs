use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Caller passed something the operation does not accept.
    Usage,
    /// Input data or a persisted file is malformed.
    Data,
    /// A loss, gradient or parameter became non-finite.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension {dim}; valid dimensions are {valid:?}")]
    InvalidDimension { dim: usize, valid: Vec<usize> },

    #[error("invalid dimension set: {0}")]
    InvalidDimSet(String),

    #[error("vector norm is zero (or below {eps:e})", eps = crate::nested::ZERO_NORM_EPS)]
    ZeroVector,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("at dimension {dim}: {source}")]
    AtDimension {
        dim: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("duplicate document id {0:?}")]
    DuplicateId(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("no usable queries: {0}")]
    NoUsableQueries(String),

    #[error("no valid records ({issues} issue(s) reported)")]
    NoValidRecords { issues: usize },

    #[error("relevant set is empty")]
    EmptyRelevantSet,

    #[error("report grids differ: {0}")]
    GridMismatch(String),

    #[error("score {0} outside [-1, 1]")]
    ScoreOutOfRange(f64),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidDimension { .. }
            | Error::InvalidDimSet(_)
            | Error::InvalidConfig(_)
            | Error::Shape(_)
            | Error::EmptyBatch(_)
            | Error::EmptyRelevantSet => ErrorKind::Usage,
            Error::NonFinite(_) => ErrorKind::Numerical,
            Error::AtDimension { source, .. } => source.kind(),
            Error::ZeroVector
            | Error::DuplicateId(_)
            | Error::Format(_)
            | Error::NoUsableQueries(_)
            | Error::NoValidRecords { .. }
            | Error::GridMismatch(_)
            | Error::ScoreOutOfRange(_)
            | Error::Io(_)
            | Error::Json(_) => ErrorKind::Data,
        }
    }

    pub(crate) fn at_dim(self, dim: usize) -> Error {
        Error::AtDimension {
            dim,
            source: Box::new(self),
        }
    }
}
