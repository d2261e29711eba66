//! The polishing loop.
//!
//! Each iteration walks a fixed permutation of the editable slots. At every
//! slot the current token is masked, the fluency model proposes its top-K
//! replacements, the K candidate sentences are scored by the matcher (and the
//! control classifier when `gamma > 0`), and the candidate with the largest
//! fused probability is written back. After each iteration the whole caption
//! is scored once more by the matcher; the run returns the iteration whose
//! caption scored highest.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{manifest_hash, CallCounts, CandidateText, CountingBackend, ScorerBackend};
use crate::config::{validate_config, InitMode, OrderMode, RunConfig};
use crate::control::ControlTask;
use crate::error::{Error, ScorerError};
use crate::fusion::{fuse, select_argmax, softmax, CandidateSet};
use crate::state::CaptionState;
use crate::vocab::{TokenId, Vocabulary};

/// Deterministic generator used for orders, random init and sampling.
pub type EngineRng = ChaCha8Rng;

pub fn engine_rng(seed: u64) -> EngineRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Visiting order over the editable slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionOrder {
    pub positions: Vec<usize>,
    pub mode: OrderMode,
}

/// Ascending editable positions, or a Fisher-Yates shuffle of them.
pub fn make_order<R: Rng + ?Sized>(state: &CaptionState, mode: OrderMode, rng: &mut R) -> Result<PositionOrder, Error> {
    let mut positions = state.editable_positions();
    if positions.is_empty() {
        return Err(Error::NothingToEdit);
    }
    if mode == OrderMode::Shuffle {
        positions.shuffle(rng);
    }
    Ok(PositionOrder { positions, mode })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSnapshot {
    pub iteration: usize,
    pub slots_after: Vec<TokenId>,
    pub text: String,
    pub sentence_match_score: f64,
    /// No slot changed during this iteration.
    pub converged: bool,
    pub candidate_records: Vec<CandidateSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: RunConfig,
    pub manifest_hash: String,
    pub prompt: Vec<TokenId>,
    pub initial_slots: Vec<TokenId>,
    pub frozen: Vec<bool>,
    /// Order used by each iteration.
    pub orders: Vec<Vec<usize>>,
    pub best_iteration: usize,
    pub best_caption: Vec<TokenId>,
    pub best_text: String,
    pub per_iteration: Vec<IterationSnapshot>,
    pub scorer_call_counts: CallCounts,
}

impl RunResult {
    pub fn last(&self) -> &IterationSnapshot {
        self.per_iteration.last().expect("a run has at least one iteration")
    }

    pub fn best(&self) -> &IterationSnapshot {
        &self.per_iteration[self.best_iteration]
    }
}

/// A failed run together with everything completed before the failure.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct RunFailure {
    #[source]
    pub error: Error,
    pub partial: Vec<IterationSnapshot>,
    pub scorer_call_counts: CallCounts,
}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        RunFailure {
            error,
            partial: Vec::new(),
            scorer_call_counts: CallCounts::default(),
        }
    }
}

fn contract(position: usize, msg: String) -> Error {
    Error::Scorer {
        position: Some(position),
        source: ScorerError::Protocol(msg),
    }
}

fn check_scores(position: usize, what: &str, scores: &[f64], expected: usize, allow_neg_inf: bool) -> Result<(), Error> {
    if scores.len() != expected {
        return Err(contract(
            position,
            format!("{what} returned {} scores for {expected} texts", scores.len()),
        ));
    }
    let bad = |s: &f64| s.is_nan() || *s == f64::INFINITY || (!allow_neg_inf && !s.is_finite());
    if let Some(s) = scores.iter().find(|s| bad(s)) {
        return Err(contract(position, format!("{what} returned non-finite score {s}")));
    }
    Ok(())
}

fn match_text(state: &CaptionState, config: &RunConfig, vocab: &Vocabulary) -> CandidateText {
    let ids = if config.include_prompt_in_match_text {
        state.full_sequence()
    } else {
        state.slots().to_vec()
    };
    CandidateText::new(ids, vocab)
}

/// One Gibbs update at slot `i`: mask, propose top-K, score, fuse, write back.
pub fn polish_position<B: ScorerBackend + ?Sized>(
    state: &CaptionState,
    i: usize,
    backend: &mut B,
    config: &RunConfig,
) -> Result<(CaptionState, CandidateSet), Error> {
    let mask_id = state.mask_id();
    let masked = state.with_slot(i, mask_id)?;

    let vocab_size = backend.vocabulary().size();
    let k = if config.k > vocab_size {
        if !config.options.clamp_k {
            return Err(Error::InvalidArgument(format!(
                "k = {} exceeds vocabulary size {vocab_size}",
                config.k
            )));
        }
        log::warn!("clamping k = {} to vocabulary size {vocab_size}", config.k);
        vocab_size
    } else {
        config.k
    };
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }

    let top = backend
        .mlm_topk(&masked.full_sequence(), masked.sequence_index(i), k)
        .map_err(Error::scorer_at(i))?;
    if top.is_empty() || top.len() > k {
        return Err(contract(i, format!("mlm_topk returned {} candidates for k = {k}", top.len())));
    }
    let mut token_ids = Vec::with_capacity(top.len() + 1);
    let mut p_bert = Vec::with_capacity(top.len() + 1);
    for (token, p) in top {
        if token as usize >= vocab_size {
            return Err(contract(i, format!("mlm_topk returned token {token} outside the vocabulary")));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(contract(i, format!("mlm_topk returned probability {p}")));
        }
        token_ids.push(token);
        p_bert.push(p);
    }
    if config.options.renormalize_bert {
        let total: f64 = p_bert.iter().sum();
        if total > 0.0 {
            p_bert.iter_mut().for_each(|p| *p /= total);
        }
    }
    let incumbent = state.slots()[i];
    if config.options.keep_incumbent && incumbent != mask_id && !token_ids.contains(&incumbent) {
        token_ids.push(incumbent);
        p_bert.push(0.0);
    }

    let candidates: Vec<CaptionState> = token_ids
        .iter()
        .map(|&t| masked.with_slot(i, t))
        .collect::<Result<_, _>>()?;
    let count = candidates.len();

    let (match_texts, control_texts) = {
        let vocab = backend.vocabulary();
        let m: Vec<CandidateText> = candidates.iter().map(|c| match_text(c, config, vocab)).collect();
        let c: Option<Vec<CandidateText>> = config
            .uses_control()
            .then(|| candidates.iter().map(|c| CandidateText::new(c.slots().to_vec(), vocab)).collect());
        (m, c)
    };

    let match_scores = backend.match_scores(&match_texts).map_err(Error::scorer_at(i))?;
    check_scores(i, "match", &match_scores, count, false)?;
    let p_clip = softmax(&match_scores, config.weights.match_temperature)?;

    let p_cls = match control_texts {
        Some(texts) => {
            let task = config.control_task.as_ref().unwrap_or(&ControlTask::None);
            let scores = backend.control_scores(task, i, &texts).map_err(Error::scorer_at(i))?;
            check_scores(i, "control", &scores, count, true)?;
            softmax(&scores, config.weights.control_temperature)?
        }
        None => vec![0.0; count],
    };

    let fused = fuse(&p_bert, &p_clip, &p_cls, &config.weights)?;
    let chosen = select_argmax(&fused)?;
    let next = state.with_slot(i, token_ids[chosen])?;
    Ok((
        next,
        CandidateSet {
            position: i,
            token_ids,
            p_bert,
            p_clip,
            p_cls,
            fused,
            chosen,
        },
    ))
}

/// Scores the whole caption once with the matcher.
pub fn sentence_match_score<B: ScorerBackend + ?Sized>(
    state: &CaptionState,
    backend: &mut B,
    config: &RunConfig,
) -> Result<f64, Error> {
    let text = match_text(state, config, backend.vocabulary());
    let scores = backend.match_scores(std::slice::from_ref(&text))?;
    if scores.len() != 1 || !scores[0].is_finite() {
        return Err(Error::Scorer {
            position: None,
            source: ScorerError::Protocol(format!("sentence match returned {scores:?}")),
        });
    }
    Ok(scores[0])
}

/// Visits every position of `order` once, then scores the sentence.
pub fn run_iteration<B: ScorerBackend + ?Sized>(
    state: &CaptionState,
    order: &PositionOrder,
    backend: &mut B,
    config: &RunConfig,
    iteration: usize,
) -> Result<(CaptionState, IterationSnapshot), Error> {
    let mut current = state.clone();
    let mut records = Vec::with_capacity(order.positions.len());
    for &i in &order.positions {
        let (next, record) = polish_position(&current, i, backend, config)?;
        current = next;
        records.push(record);
    }
    let score = sentence_match_score(&current, backend, config)?;
    let text = backend.vocabulary().detokenize(current.slots());
    let snapshot = IterationSnapshot {
        iteration,
        slots_after: current.slots().to_vec(),
        text,
        sentence_match_score: score,
        converged: current.slots() == state.slots(),
        candidate_records: records,
    };
    Ok((current, snapshot))
}

/// Builds the starting canvas for `config`. Infill slots open as masks.
pub fn initial_state<R: Rng + ?Sized>(config: &RunConfig, vocab: &Vocabulary, rng: &mut R) -> Result<CaptionState, Error> {
    let prompt = vocab.encode_words(&config.prompt_text)?;
    let mask = vocab.mask_id();
    let state = match &config.control_task {
        Some(ControlTask::Infill(spec)) => {
            spec.validate()?;
            let slots = spec
                .reference_tokens
                .iter()
                .enumerate()
                .map(|(i, &t)| if spec.editable_positions.contains(&i) { mask } else { t })
                .collect();
            CaptionState::new(prompt, slots, spec.frozen_mask(), mask)?
        }
        _ => CaptionState::masked(prompt, config.n, mask)?,
    };
    let state = match config.init_mode {
        InitMode::AllMask => state,
        InitMode::RandomTokens => {
            let content: Vec<TokenId> = (0..vocab.size() as TokenId).filter(|&t| vocab.is_content(t)).collect();
            if content.is_empty() {
                return Err(Error::InvalidArgument("vocabulary has no content tokens".into()));
            }
            let mut s = state;
            for i in s.editable_positions() {
                let t = *content.choose(rng).expect("nonempty");
                s = s.with_slot(i, t)?;
            }
            s
        }
    };
    state.validate(vocab)?;
    Ok(state)
}

/// Full polishing run. Deterministic given the config and the backend.
pub fn run<B: ScorerBackend + ?Sized>(config: &RunConfig, backend: &mut B) -> Result<RunResult, RunFailure> {
    validate_config(config, backend.vocabulary()).map_err(Error::Config)?;
    let manifest = backend.manifest();
    manifest.check_config(config).map_err(Error::from)?;
    let hash = manifest_hash(&manifest, backend.vocabulary());

    let mut rng = engine_rng(config.seed);
    let initial = initial_state(config, backend.vocabulary(), &mut rng)?;
    let mut order = make_order(&initial, config.order_mode, &mut rng)?;

    let mut counted = CountingBackend::new(backend);
    let mut state = initial.clone();
    let mut snapshots = Vec::with_capacity(config.iterations);
    let mut orders = Vec::with_capacity(config.iterations);
    for t in 0..config.iterations {
        if t > 0 && config.reshuffle_each_iter {
            order = make_order(&state, config.order_mode, &mut rng)?;
        }
        match run_iteration(&state, &order, &mut counted, config, t) {
            Ok((next, snapshot)) => {
                state = next;
                snapshots.push(snapshot);
                orders.push(order.positions.clone());
            }
            Err(error) => {
                return Err(RunFailure {
                    error,
                    partial: snapshots,
                    scorer_call_counts: counted.counts(),
                })
            }
        }
    }

    let mut best = 0;
    for (t, s) in snapshots.iter().enumerate() {
        if s.sentence_match_score > snapshots[best].sentence_match_score {
            best = t;
        }
    }
    let counts = counted.counts();
    Ok(RunResult {
        config: config.clone(),
        manifest_hash: hash,
        prompt: initial.prompt().to_vec(),
        initial_slots: initial.slots().to_vec(),
        frozen: initial.frozen().to_vec(),
        orders,
        best_iteration: best,
        best_caption: snapshots[best].slots_after.clone(),
        best_text: snapshots[best].text.clone(),
        per_iteration: snapshots,
        scorer_call_counts: counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmSampleMode {
    /// Draw from the full predicted distribution.
    Stochastic,
    /// Take the most probable token.
    Greedy,
}

/// Plain Gibbs sampling from the fluency model alone, starting from an
/// all-mask canvas. Returns the final slots.
pub fn gibbs_lm_sample<B: ScorerBackend + ?Sized, R: Rng + ?Sized>(
    prompt: &[TokenId],
    n: usize,
    iterations: usize,
    order_mode: OrderMode,
    backend: &mut B,
    rng: &mut R,
    mode: LmSampleMode,
) -> Result<Vec<TokenId>, Error> {
    let vocab_size = backend.vocabulary().size();
    let mut state = CaptionState::masked(prompt.to_vec(), n, backend.vocabulary().mask_id())?;
    state.validate(backend.vocabulary())?;
    let order = make_order(&state, order_mode, rng)?;
    for _ in 0..iterations {
        for &i in &order.positions {
            let masked = state.with_slot(i, state.mask_id())?;
            let tokens = masked.full_sequence();
            let pos = masked.sequence_index(i);
            let token = match mode {
                LmSampleMode::Greedy => {
                    let top = backend.mlm_topk(&tokens, pos, 1).map_err(Error::scorer_at(i))?;
                    match top.first() {
                        Some(&(t, _)) if (t as usize) < vocab_size => t,
                        _ => return Err(contract(i, format!("mlm_topk returned {top:?} for k = 1"))),
                    }
                }
                LmSampleMode::Stochastic => {
                    let dist = backend.mlm_distribution(&tokens, pos).map_err(Error::scorer_at(i))?;
                    if dist.len() != vocab_size {
                        return Err(contract(
                            i,
                            format!("distribution of length {} for vocabulary {vocab_size}", dist.len()),
                        ));
                    }
                    let sampler = WeightedIndex::new(&dist)
                        .map_err(|e| contract(i, format!("unusable distribution: {e}")))?;
                    sampler.sample(rng) as TokenId
                }
            };
            state = state.with_slot(i, token)?;
        }
    }
    Ok(state.slots().to_vec())
}
