//! Caption records: one line per finished run, consumable by external
//! metric suites. Both the best-of-iterations and the last-iteration caption
//! are exported.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::backend::CallCounts;
use crate::config::{OrderMode, RunConfig};
use crate::engine::RunResult;
use crate::error::Error;
use crate::json;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image: String,
    pub seed: u64,
    pub order: OrderMode,
    pub caption: String,
    pub best_iteration: usize,
    pub best_score: f64,
    pub last_caption: String,
    pub last_score: f64,
    pub iteration_scores: Vec<f64>,
    /// Caption with rewritten infill slots wrapped in `[[...]]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub highlighted: Option<String>,
    pub calls: CallCounts,
    pub manifest_hash: String,
    pub config: RunConfig,
}

impl CaptionRecord {
    pub fn from_run(image: &str, result: &RunResult, vocab: &Vocabulary) -> Self {
        let best = result.best();
        let last = result.last();
        let highlighted = result.frozen.iter().any(|f| *f).then(|| {
            best.slots_after
                .iter()
                .zip(&result.frozen)
                .map(|(&t, &frozen)| {
                    let w = vocab.detokenize(&[t]);
                    if frozen {
                        w
                    } else {
                        format!("[[{w}]]")
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        });
        CaptionRecord {
            image: image.to_string(),
            seed: result.config.seed,
            order: result.config.order_mode,
            caption: best.text.clone(),
            best_iteration: result.best_iteration,
            best_score: best.sentence_match_score,
            last_caption: last.text.clone(),
            last_score: last.sentence_match_score,
            iteration_scores: result.per_iteration.iter().map(|s| s.sentence_match_score).collect(),
            highlighted,
            calls: result.scorer_call_counts,
            manifest_hash: result.manifest_hash.clone(),
            config: result.config.clone(),
        }
    }

    pub fn to_line(&self) -> Result<String, Error> {
        json::to_line(self)
    }
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<CaptionRecord>, Error> {
    let mut out = Vec::new();
    for (no, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::InvalidArgument(format!("caption record line {}: {e}", no + 1)))?,
        );
    }
    Ok(out)
}
