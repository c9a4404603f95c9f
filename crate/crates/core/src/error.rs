use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("loss became NaN at step {step}")]
    NanLoss { step: usize },

    #[error("{what} out of range: {index} >= {len}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checksum mismatch in {path}: header {expected:#018x}, payload {actual:#018x}")]
    Checksum {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("cache key mismatch in {path}: {reason}")]
    StaleCache { path: PathBuf, reason: String },

    #[error("missing modality: {0}")]
    MissingModality(String),

    #[error("dataset integrity: {0}")]
    Integrity(String),

    #[error("cached and on-the-fly losses diverge at step {step}: {cached} vs {on_the_fly}")]
    Equivalence {
        step: usize,
        cached: f64,
        on_the_fly: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op,
            left: vec![left.0, left.1],
            right: vec![right.0, right.1],
        }
    }

    /// Input problems a user can fix (bad config, missing or malformed files),
    /// as opposed to failures during a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Format { .. }
                | Error::MissingModality(_)
                | Error::Integrity(_)
                | Error::StaleCache { .. }
                | Error::Checksum { .. }
                | Error::Json { .. }
        ) || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
