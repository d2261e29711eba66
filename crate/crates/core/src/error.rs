use std::io;

use thiserror::Error;

use crate::config::ConfigIssue;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Numeric(#[from] NumericError),

    #[error("invalid configuration: {}", format_issues(.0))]
    Config(Vec<ConfigIssue>),

    #[error("nothing to edit: every slot is frozen")]
    NothingToEdit,

    #[error("scorer error{}: {source}", .position.map(|p| format!(" at position {p}")).unwrap_or_default())]
    Scorer {
        position: Option<usize>,
        #[source]
        source: ScorerError,
    },

    #[error("word {0:?} is not in the backend vocabulary")]
    UnknownWord(String),

    #[error("fixture error: {0}")]
    Fixture(String),

    #[error("oracle refused: {0}")]
    OracleBudget(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn scorer_at(position: usize) -> impl FnOnce(ScorerError) -> Error {
        move |source| Error::Scorer {
            position: Some(position),
            source,
        }
    }
}

impl From<ScorerError> for Error {
    fn from(source: ScorerError) -> Self {
        Error::Scorer {
            position: None,
            source,
        }
    }
}

fn format_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("{}: {}", i.code, i.message))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Non-finite or otherwise unusable numbers reaching the fusion math.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericError {
    #[error("NaN at index {0}")]
    NaN(usize),
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("no finite entry to normalise")]
    NoFiniteEntry,
}

/// Failures raised by a scorer backend.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScorerError {
    /// Connection-level failure; safe to retry.
    #[error("transport error: {0}")]
    Transport(String),
    /// Reply that does not follow the wire protocol or its contracts.
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error {code}: {message}")]
    Remote { code: String, message: String },
    #[error("unknown or expired image handle {0:?}")]
    StaleHandle(String),
    #[error("image decode failed: {0}")]
    ImageDecode(String),
    #[error("protocol version mismatch: client speaks {client}, server speaks {server}")]
    VersionMismatch { client: u32, server: u32 },
    #[error("backend does not support {0}")]
    Unsupported(String),
    #[error("replay mismatch: {0}")]
    ReplayMismatch(String),
}

impl ScorerError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ScorerError::Transport(_))
    }
}
