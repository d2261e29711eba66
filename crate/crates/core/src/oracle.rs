//! Brute-force reference computations for toy-scale backends.
//!
//! [`oracle_select`] redoes one position update with straight-line code:
//! it takes the full predicted distribution, sorts it itself, builds the
//! candidate sentences by hand, and does its own softmax and fusion. It
//! shares nothing with the engine except the backend it queries.

use std::cmp::Ordering;

use crate::backend::{CandidateText, ScorerBackend};
use crate::config::RunConfig;
use crate::control::ControlTask;
use crate::error::Error;
use crate::state::CaptionState;
use crate::vocab::{TokenId, Vocabulary};

pub const ENUMERATION_BUDGET: usize = 1_000_000;

fn naive_softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let mut top = f64::NEG_INFINITY;
    for &s in scores {
        if s > top {
            top = s;
        }
    }
    let mut weights = Vec::new();
    let mut total = 0.0;
    for &s in scores {
        let w = libm::exp((s - top) / temperature);
        total += w;
        weights.push(w);
    }
    let mut out = Vec::new();
    for w in weights {
        out.push(w / total);
    }
    out
}

/// Token the engine should pick at slot `i` of `state`.
pub fn oracle_select<B: ScorerBackend + ?Sized>(
    state: &CaptionState,
    i: usize,
    backend: &mut B,
    config: &RunConfig,
) -> Result<TokenId, Error> {
    let vocab: Vocabulary = backend.vocabulary().clone();
    let prompt_len = state.prompt().len();
    let mut tokens: Vec<TokenId> = state.prompt().to_vec();
    tokens.extend_from_slice(state.slots());
    let at = prompt_len + i;
    tokens[at] = vocab.mask_id();

    let dist = backend.mlm_distribution(&tokens, at)?;
    let mut ranked: Vec<usize> = (0..dist.len()).collect();
    ranked.sort_by(|&a, &b| match dist[b].partial_cmp(&dist[a]).unwrap_or(Ordering::Equal) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    let mut k = config.k;
    if k > vocab.size() {
        k = vocab.size();
    }

    let mut cands: Vec<TokenId> = Vec::new();
    let mut p_bert: Vec<f64> = Vec::new();
    for &id in ranked.iter().take(k) {
        cands.push(id as TokenId);
        p_bert.push(dist[id]);
    }
    if config.options.renormalize_bert {
        let mut s = 0.0;
        for p in &p_bert {
            s += p;
        }
        if s > 0.0 {
            for p in p_bert.iter_mut() {
                *p /= s;
            }
        }
    }
    let old = state.slots()[i];
    if config.options.keep_incumbent && old != vocab.mask_id() && !cands.contains(&old) {
        cands.push(old);
        p_bert.push(0.0);
    }

    let mut match_texts = Vec::new();
    let mut control_texts = Vec::new();
    for &c in &cands {
        let mut seq = tokens.clone();
        seq[at] = c;
        let m = if config.include_prompt_in_match_text {
            seq.clone()
        } else {
            seq[prompt_len..].to_vec()
        };
        match_texts.push(CandidateText {
            text: vocab.detokenize(&m),
            token_ids: m,
        });
        let s = seq[prompt_len..].to_vec();
        control_texts.push(CandidateText {
            text: vocab.detokenize(&s),
            token_ids: s,
        });
    }

    let w = config.weights;
    let p_clip = naive_softmax(&backend.match_scores(&match_texts)?, w.match_temperature);
    let p_cls = if w.gamma > 0.0 {
        let task = config.control_task.clone().unwrap_or(ControlTask::None);
        naive_softmax(&backend.control_scores(&task, i, &control_texts)?, w.control_temperature)
    } else {
        vec![0.0; cands.len()]
    };

    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for j in 0..cands.len() {
        let value = w.alpha * p_bert[j] + w.beta * p_clip[j] + w.gamma * p_cls[j];
        if j == 0 || value > best_value {
            best = j;
            best_value = value;
        }
    }
    Ok(cands[best])
}

/// Every length-`n` sequence over the vocabulary, ranked by `score_fn`
/// (descending; ties by ascending sequence). Refuses more than `budget`
/// sequences.
pub fn oracle_enumerate<F>(n: usize, vocab: &Vocabulary, budget: usize, mut score_fn: F) -> Result<Vec<(Vec<TokenId>, f64)>, Error>
where
    F: FnMut(&[TokenId]) -> Result<f64, Error>,
{
    let v = vocab.size();
    let total = (0..n).try_fold(1usize, |acc, _| acc.checked_mul(v));
    let total = match total {
        Some(t) if t <= budget => t,
        _ => {
            return Err(Error::OracleBudget(format!(
                "{v}^{n} sequences exceed the budget of {budget}"
            )))
        }
    };
    let mut out = Vec::with_capacity(total);
    let mut seq = vec![0 as TokenId; n];
    for _ in 0..total {
        let s = score_fn(&seq)?;
        if s.is_nan() {
            return Err(Error::InvalidArgument(format!("score of {seq:?} is NaN")));
        }
        out.push((seq.clone(), s));
        // odometer increment, last position fastest
        for d in (0..n).rev() {
            seq[d] += 1;
            if (seq[d] as usize) < v {
                break;
            }
            seq[d] = 0;
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}
