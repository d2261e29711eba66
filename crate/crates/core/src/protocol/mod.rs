//! Line protocol between the engine and a scorer server.
//!
//! Each message is one canonical JSON object on one line (UTF-8, `\n`
//! terminated). A session is strictly request/reply: the client never sends
//! a request before the previous reply has arrived.
//!
//! Requests carry `op` and a client-chosen integer `id`. Replies echo `id`
//! and carry exactly one of `ok` (op-specific payload) or `error`
//! (`{"code": ..., "message": ...}`). Floats are written with 17
//! significant digits.
//!
//! | op               | request fields                                  | `ok` payload                      |
//! |------------------|-------------------------------------------------|-----------------------------------|
//! | `handshake`      | `protocol_version`, `client`                    | `manifest`, `vocabulary`          |
//! | `register_image` | `bytes_b64` or `path`                           | `handle`                          |
//! | `mlm_topk`       | `tokens`, `mask_pos`, `k`                       | `token_ids`, `probs`              |
//! | `mlm_dist`       | `tokens`, `mask_pos`                            | `probs` (one per vocabulary entry)|
//! | `match`          | `image`, `texts`, `token_ids`                   | `scores`, `truncated`             |
//! | `control`        | `task`, `position`, `texts`, `token_ids`        | `scores` (`null` = excluded)      |
//! | `embed`          | `texts`                                         | `vectors`                         |
//!
//! Error codes: `bad_request`, `unknown_op`, `stale_handle`,
//! `image_decode`, `unsupported`, `version_mismatch`, `internal`.
//!
//! `match` scores are raw alignment scores (pre-softmax). `control` scores
//! are raw classifier scores; a `null` score marks a candidate the
//! classifier rules out entirely.

mod client;
mod server;
mod transport;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use client::RemoteBackend;
pub use server::{LoopbackTransport, SyntheticServer};
pub use transport::{ChildTransport, RecordingTransport, ReplayTransport, StreamTransport, TcpTransport, Transport};

use crate::backend::BackendManifest;
use crate::error::ScorerError;
use crate::vocab::{TokenId, Vocabulary};

pub use crate::backend::PROTOCOL_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Handshake {
        id: u64,
        protocol_version: u32,
        client: String,
    },
    RegisterImage {
        id: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bytes_b64: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
    },
    MlmTopk {
        id: u64,
        tokens: Vec<TokenId>,
        mask_pos: usize,
        k: usize,
    },
    MlmDist {
        id: u64,
        tokens: Vec<TokenId>,
        mask_pos: usize,
    },
    Match {
        id: u64,
        image: String,
        texts: Vec<String>,
        token_ids: Vec<Vec<TokenId>>,
    },
    Control {
        id: u64,
        task: String,
        position: usize,
        texts: Vec<String>,
        token_ids: Vec<Vec<TokenId>>,
    },
    Embed {
        id: u64,
        texts: Vec<String>,
    },
}

impl Request {
    pub fn id(&self) -> u64 {
        match self {
            Request::Handshake { id, .. }
            | Request::RegisterImage { id, .. }
            | Request::MlmTopk { id, .. }
            | Request::MlmDist { id, .. }
            | Request::Match { id, .. }
            | Request::Control { id, .. }
            | Request::Embed { id, .. } => *id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ok: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandshakeOk {
    pub manifest: BackendManifest,
    pub vocabulary: Vocabulary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterOk {
    pub handle: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkOk {
    pub token_ids: Vec<TokenId>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistOk {
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresOk {
    pub scores: Vec<Option<f64>>,
    #[serde(default)]
    pub truncated: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedOk {
    pub vectors: Vec<Vec<f64>>,
}

pub(crate) fn error_from_body(body: ErrorBody) -> ScorerError {
    match body.code.as_str() {
        "stale_handle" => ScorerError::StaleHandle(body.message),
        "image_decode" => ScorerError::ImageDecode(body.message),
        "unsupported" | "unknown_op" => ScorerError::Unsupported(body.message),
        _ => ScorerError::Remote {
            code: body.code,
            message: body.message,
        },
    }
}

pub(crate) fn body_from_error(e: &ScorerError) -> ErrorBody {
    let (code, message) = match e {
        ScorerError::StaleHandle(m) => ("stale_handle", m.clone()),
        ScorerError::ImageDecode(m) => ("image_decode", m.clone()),
        ScorerError::Unsupported(m) => ("unsupported", m.clone()),
        ScorerError::VersionMismatch { .. } => ("version_mismatch", e.to_string()),
        ScorerError::Protocol(m) => ("bad_request", m.clone()),
        ScorerError::Remote { code, message } => (code.as_str(), message.clone()),
        other => ("internal", other.to_string()),
    };
    ErrorBody {
        code: code.to_string(),
        message,
    }
}
