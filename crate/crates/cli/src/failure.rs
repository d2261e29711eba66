//! Command failures and their machine-readable form on stderr.

use std::fmt;

use gibbscap::{Error, ScorerError};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Bad flags, config or input files. Exit code 2.
    Usage,
    /// Failure while running. Exit code 1.
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub code: String,
    pub message: String,
    pub details: Option<Value>,
}

impl CliError {
    pub fn usage(code: &str, message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Usage,
            code: code.to_string(),
            message: message.into(),
            details: None,
        }
    }

    pub fn runtime(code: &str, message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Runtime,
            code: code.to_string(),
            message: message.into(),
            details: None,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::Usage => 2,
            Kind::Runtime => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        let mut body = json!({ "code": self.code, "message": self.message });
        if let Some(d) = &self.details {
            body["details"] = d.clone();
        }
        json!({ "error": body })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

pub fn scorer_code(e: &ScorerError) -> &str {
    match e {
        ScorerError::Transport(_) => "transport",
        ScorerError::Protocol(_) => "protocol",
        ScorerError::Remote { code, .. } => code,
        ScorerError::StaleHandle(_) => "stale_handle",
        ScorerError::ImageDecode(_) => "image_decode",
        ScorerError::VersionMismatch { .. } => "version_mismatch",
        ScorerError::Unsupported(_) => "unsupported",
        ScorerError::ReplayMismatch(_) => "replay_mismatch",
    }
}

impl From<ScorerError> for CliError {
    fn from(e: ScorerError) -> Self {
        let kind = match e {
            ScorerError::Unsupported(_) | ScorerError::VersionMismatch { .. } => Kind::Usage,
            _ => Kind::Runtime,
        };
        CliError {
            kind,
            code: scorer_code(&e).to_string(),
            message: e.to_string(),
            details: None,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Config(issues) => CliError::usage("config", message).with_details(json!({ "issues": issues })),
            Error::InvalidArgument(_) => CliError::usage("invalid_argument", message),
            Error::NothingToEdit => CliError::usage("nothing_to_edit", message),
            Error::UnknownWord(_) => CliError::usage("unknown_word", message),
            Error::Fixture(_) => CliError::usage("fixture", message),
            Error::Scorer { position, source } => {
                let mut err = CliError::from(source);
                if let Some(p) = position {
                    err.details = Some(json!({ "position": p }));
                }
                err
            }
            Error::Json(_) => CliError::usage("json", message),
            Error::Io(_) => CliError::runtime("io", message),
            _ => CliError::runtime("internal", message),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime("io", e.to_string())
    }
}

/// Io error annotated with the path involved.
pub fn io_at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::runtime("io", format!("{}: {e}", path.display()))
}
