//! The scorer contract the engine drives: a masked language model for
//! fluency, an image-text matcher, and an optional control classifier.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::control::ControlTask;
use crate::error::ScorerError;
use crate::json;
use crate::vocab::{TokenId, Vocabulary};

pub const PROTOCOL_VERSION: u32 = 1;

/// A candidate sentence as handed to the matcher or the control scorer. Both
/// the token ids and their detokenized text are sent; the scorer picks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateText {
    pub token_ids: Vec<TokenId>,
    pub text: String,
}

impl CandidateText {
    pub fn new(token_ids: Vec<TokenId>, vocab: &Vocabulary) -> Self {
        let text = vocab.detokenize(&token_ids);
        CandidateText { token_ids, text }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendManifest {
    pub protocol_version: u32,
    pub vocab_size: usize,
    pub mask_id: TokenId,
    pub supported_ops: BTreeSet<String>,
    pub supported_control_tasks: BTreeSet<String>,
    pub model_tags: Vec<String>,
    #[serde(default)]
    pub embed_dim: Option<usize>,
    /// Multiplier the server applies to produce CLIP-S style summary scores.
    #[serde(default)]
    pub match_score_scale: Option<f64>,
}

impl BackendManifest {
    pub fn supports_op(&self, op: &str) -> bool {
        self.supported_ops.contains(op)
    }

    /// A task tag `kind:arg` is supported when either the full tag or its
    /// bare kind is listed.
    pub fn supports_control(&self, tag: &str) -> bool {
        let kind = tag.split_once(':').map_or(tag, |(k, _)| k);
        self.supported_control_tasks.contains(tag) || self.supported_control_tasks.contains(kind)
    }

    /// Refuses a config the backend cannot serve, before any scoring call.
    pub fn check_config(&self, config: &RunConfig) -> Result<(), ScorerError> {
        for op in ["mlm_topk", "match"] {
            if !self.supports_op(op) {
                return Err(ScorerError::Unsupported(format!("op {op}")));
            }
        }
        if config.weights.gamma > 0.0 {
            if !self.supports_op("control") {
                return Err(ScorerError::Unsupported("op control".into()));
            }
            if let Some(tag) = config.control_task.as_ref().and_then(ControlTask::tag) {
                if !self.supports_control(&tag) {
                    return Err(ScorerError::Unsupported(format!("control task {tag}")));
                }
            }
        }
        Ok(())
    }
}

/// Hex SHA-256 over the canonical encoding of the manifest and vocabulary.
pub fn manifest_hash(manifest: &BackendManifest, vocab: &Vocabulary) -> String {
    let mut hasher = Sha256::new();
    hasher.update(json::to_line(manifest).expect("manifest serializes").as_bytes());
    hasher.update(b"\n");
    hasher.update(json::to_line(vocab).expect("vocabulary serializes").as_bytes());
    hex::encode(hasher.finalize())
}

pub trait ScorerBackend {
    fn vocabulary(&self) -> &Vocabulary;

    fn manifest(&self) -> BackendManifest;

    /// Top-`k` tokens for the masked position of `tokens`, most probable
    /// first. `mask_pos` indexes `tokens`.
    fn mlm_topk(&mut self, tokens: &[TokenId], mask_pos: usize, k: usize) -> Result<Vec<(TokenId, f64)>, ScorerError>;

    /// Full predicted distribution over the vocabulary at `mask_pos`.
    fn mlm_distribution(&mut self, tokens: &[TokenId], mask_pos: usize) -> Result<Vec<f64>, ScorerError>;

    /// One raw (pre-softmax) alignment score per text against the session's
    /// image; higher is better aligned.
    fn match_scores(&mut self, texts: &[CandidateText]) -> Result<Vec<f64>, ScorerError>;

    /// One raw classifier score per text. `position` is the slot being
    /// edited, relative to the caption slots.
    fn control_scores(&mut self, task: &ControlTask, position: usize, texts: &[CandidateText]) -> Result<Vec<f64>, ScorerError>;

    fn embed(&mut self, _texts: &[String]) -> Result<Vec<Vec<f64>>, ScorerError> {
        Err(ScorerError::Unsupported("op embed".into()))
    }
}

impl<B: ScorerBackend + ?Sized> ScorerBackend for &mut B {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn manifest(&self) -> BackendManifest {
        (**self).manifest()
    }

    fn mlm_topk(&mut self, tokens: &[TokenId], mask_pos: usize, k: usize) -> Result<Vec<(TokenId, f64)>, ScorerError> {
        (**self).mlm_topk(tokens, mask_pos, k)
    }

    fn mlm_distribution(&mut self, tokens: &[TokenId], mask_pos: usize) -> Result<Vec<f64>, ScorerError> {
        (**self).mlm_distribution(tokens, mask_pos)
    }

    fn match_scores(&mut self, texts: &[CandidateText]) -> Result<Vec<f64>, ScorerError> {
        (**self).match_scores(texts)
    }

    fn control_scores(&mut self, task: &ControlTask, position: usize, texts: &[CandidateText]) -> Result<Vec<f64>, ScorerError> {
        (**self).control_scores(task, position, texts)
    }

    fn embed(&mut self, texts: &[String]) -> Result<Vec<Vec<f64>>, ScorerError> {
        (**self).embed(texts)
    }
}

impl<B: ScorerBackend + ?Sized> ScorerBackend for Box<B> {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn manifest(&self) -> BackendManifest {
        (**self).manifest()
    }

    fn mlm_topk(&mut self, tokens: &[TokenId], mask_pos: usize, k: usize) -> Result<Vec<(TokenId, f64)>, ScorerError> {
        (**self).mlm_topk(tokens, mask_pos, k)
    }

    fn mlm_distribution(&mut self, tokens: &[TokenId], mask_pos: usize) -> Result<Vec<f64>, ScorerError> {
        (**self).mlm_distribution(tokens, mask_pos)
    }

    fn match_scores(&mut self, texts: &[CandidateText]) -> Result<Vec<f64>, ScorerError> {
        (**self).match_scores(texts)
    }

    fn control_scores(&mut self, task: &ControlTask, position: usize, texts: &[CandidateText]) -> Result<Vec<f64>, ScorerError> {
        (**self).control_scores(task, position, texts)
    }

    fn embed(&mut self, texts: &[String]) -> Result<Vec<Vec<f64>>, ScorerError> {
        (**self).embed(texts)
    }
}

/// Scorer invocations, one per batched request.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub mlm_calls: u64,
    pub match_calls: u64,
    pub control_calls: u64,
}

impl std::ops::Add for CallCounts {
    type Output = CallCounts;

    fn add(self, o: CallCounts) -> CallCounts {
        CallCounts {
            mlm_calls: self.mlm_calls + o.mlm_calls,
            match_calls: self.match_calls + o.match_calls,
            control_calls: self.control_calls + o.control_calls,
        }
    }
}

/// Pass-through wrapper that counts calls reaching the inner backend.
#[derive(Debug)]
pub struct CountingBackend<B> {
    inner: B,
    counts: CallCounts,
}

impl<B: ScorerBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        CountingBackend {
            inner,
            counts: CallCounts::default(),
        }
    }

    pub fn counts(&self) -> CallCounts {
        self.counts
    }

    pub fn reset(&mut self) {
        self.counts = CallCounts::default();
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn into_inner(self) -> B {
        self.inner
    }
}

impl<B: ScorerBackend> ScorerBackend for CountingBackend<B> {
    fn vocabulary(&self) -> &Vocabulary {
        self.inner.vocabulary()
    }

    fn manifest(&self) -> BackendManifest {
        self.inner.manifest()
    }

    fn mlm_topk(&mut self, tokens: &[TokenId], mask_pos: usize, k: usize) -> Result<Vec<(TokenId, f64)>, ScorerError> {
        self.counts.mlm_calls += 1;
        self.inner.mlm_topk(tokens, mask_pos, k)
    }

    fn mlm_distribution(&mut self, tokens: &[TokenId], mask_pos: usize) -> Result<Vec<f64>, ScorerError> {
        self.counts.mlm_calls += 1;
        self.inner.mlm_distribution(tokens, mask_pos)
    }

    fn match_scores(&mut self, texts: &[CandidateText]) -> Result<Vec<f64>, ScorerError> {
        self.counts.match_calls += 1;
        self.inner.match_scores(texts)
    }

    fn control_scores(&mut self, task: &ControlTask, position: usize, texts: &[CandidateText]) -> Result<Vec<f64>, ScorerError> {
        self.counts.control_calls += 1;
        self.inner.control_scores(task, position, texts)
    }

    fn embed(&mut self, texts: &[String]) -> Result<Vec<Vec<f64>>, ScorerError> {
        self.inner.embed(texts)
    }
}
