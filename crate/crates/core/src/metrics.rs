//! Caption-set metrics: Div-n, vocabulary size, BLEU, matcher-score
//! summaries and embedding cosine similarity.
//!
//! Words are whitespace-split, lowercased, with ASCII punctuation removed;
//! words that end up empty are dropped.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::engine::RunResult;
use crate::error::Error;

pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Captions already split into words.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub captions: Vec<Vec<String>>,
}

impl CaptionSet {
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        CaptionSet {
            captions: texts.iter().map(|t| normalize_words(t.as_ref())).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn total_words(&self) -> usize {
        self.captions.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShortCaption {
    /// Fail on a caption with fewer than `n` words.
    #[default]
    Error,
    /// Drop such captions from both counts (with a warning).
    Skip,
}

/// Distinct n-grams across the set divided by total words across the set.
pub fn div_n(set: &CaptionSet, n: usize, short: ShortCaption) -> Result<f64, Error> {
    if n == 0 {
        return Err(Error::InvalidArgument("n-gram order must be at least 1".into()));
    }
    if set.is_empty() {
        return Err(Error::InvalidArgument("Div-n of an empty caption set".into()));
    }
    let mut grams: HashSet<&[String]> = HashSet::new();
    let mut words = 0usize;
    for (idx, caption) in set.captions.iter().enumerate() {
        if caption.len() < n {
            match short {
                ShortCaption::Error => {
                    return Err(Error::InvalidArgument(format!(
                        "caption {idx} has {} words, fewer than n = {n}",
                        caption.len()
                    )))
                }
                ShortCaption::Skip => {
                    log::warn!("skipping caption {idx}: {} words < {n}", caption.len());
                    continue;
                }
            }
        }
        words += caption.len();
        grams.extend(caption.windows(n));
    }
    if words == 0 {
        return Err(Error::InvalidArgument("no caption long enough for Div-n".into()));
    }
    Ok(grams.len() as f64 / words as f64)
}

/// Distinct words over every caption of every set.
pub fn vocab_size(sets: &[CaptionSet]) -> usize {
    sets.iter()
        .flat_map(|s| s.captions.iter().flatten())
        .map(|w| w.to_lowercase())
        .collect::<HashSet<_>>()
        .len()
}

fn ngram_counts(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for g in words.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU with uniform weights up to `max_n`, clipped n-gram counts,
/// the closest-reference brevity penalty and no smoothing.
pub fn bleu_n(prediction: &[String], references: &[Vec<String>], max_n: usize) -> Result<f64, Error> {
    if references.is_empty() {
        return Err(Error::InvalidArgument("BLEU needs at least one reference".into()));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("BLEU order must be at least 1".into()));
    }
    if prediction.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let pred = ngram_counts(prediction, n);
        let total: usize = pred.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = pred
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = prediction.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("nonempty references");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / max_n as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
}

pub fn summarize(scores: &[f64]) -> Result<ScoreSummary, Error> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("nothing to summarise".into()));
    }
    // sorted so the result does not depend on input order
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok(ScoreSummary {
        count: sorted.len(),
        mean,
        stddev: var.sqrt(),
    })
}

/// Mean and spread of each run's best-snapshot match score.
pub fn matcher_score_summary(runs: &[RunResult]) -> Result<ScoreSummary, Error> {
    let scores: Vec<f64> = runs.iter().map(|r| r.best().sentence_match_score).collect();
    summarize(&scores)
}

/// Cosine similarity.
pub fn bsim(a: &[f64], b: &[f64]) -> Result<f64, Error> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("dimensions differ: {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
