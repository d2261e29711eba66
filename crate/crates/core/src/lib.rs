//! Gibbs-style caption polishing.
//!
//! A caption is a fixed-length canvas of token slots. Each iteration visits
//! every editable slot, masks it, asks a masked language model for its top-K
//! replacements, re-scores the K candidate sentences with an image-text
//! matcher (and optionally a control classifier), and keeps the candidate
//! maximising `alpha * p_fluency + beta * p_match + gamma * p_control`.
//!
//! Scorers are reached through the [`ScorerBackend`] trait. Two backends ship
//! with the crate: table-driven synthetic scorers ([`synthetic`]) for exact,
//! model-free verification, and a line-protocol client ([`protocol`]) for
//! pretrained models hosted in a separate server process.

pub mod backend;
pub mod config;
pub mod control;
pub mod engine;
pub mod error;
pub mod fusion;
pub mod json;
pub mod metrics;
pub mod oracle;
pub mod protocol;
pub mod records;
pub mod state;
pub mod synthetic;
pub mod trace;
pub mod vocab;

pub use backend::{BackendManifest, CallCounts, CandidateText, CountingBackend, ScorerBackend};
pub use config::{validate_config, ConfigIssue, EngineOptions, InitMode, OrderMode, RunConfig};
pub use control::{ControlTask, InfillSpec, PosTemplate, SentimentLexicon, StyleTarget};
pub use engine::{
    gibbs_lm_sample, make_order, polish_position, run, run_iteration, IterationSnapshot,
    LmSampleMode, PositionOrder, RunFailure, RunResult,
};
pub use error::{Error, NumericError, ScorerError};
pub use fusion::{fuse, select_argmax, softmax, CandidateSet, FusionWeights};
pub use state::CaptionState;
pub use vocab::{TokenId, Vocabulary};
