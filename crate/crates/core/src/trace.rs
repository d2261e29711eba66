//! Line-delimited run traces.
//!
//! Schema `gibbscap.trace/1`, one canonical JSON object per line:
//!
//! - `header`: schema id, effective config, backend manifest hash, prompt,
//!   initial slots and frozen flags;
//! - `candidate`: one per visited position, carrying the full candidate set;
//! - `snapshot`: one per iteration, after that iteration's candidates;
//! - `result`: the best-of-iterations caption and the call ledger.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::backend::CallCounts;
use crate::config::RunConfig;
use crate::engine::{IterationSnapshot, RunResult};
use crate::error::Error;
use crate::fusion::CandidateSet;
use crate::json;
use crate::vocab::TokenId;

pub const TRACE_SCHEMA: &str = "gibbscap.trace/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceRecord {
    Header {
        schema: String,
        config: RunConfig,
        manifest_hash: String,
        prompt: Vec<TokenId>,
        initial_slots: Vec<TokenId>,
        frozen: Vec<bool>,
    },
    Candidate {
        iteration: usize,
        step: usize,
        #[serde(flatten)]
        set: CandidateSet,
    },
    Snapshot {
        iteration: usize,
        order: Vec<usize>,
        slots_after: Vec<TokenId>,
        text: String,
        sentence_match_score: f64,
        converged: bool,
    },
    Result {
        best_iteration: usize,
        best_caption: Vec<TokenId>,
        best_text: String,
        scorer_call_counts: CallCounts,
    },
}

pub fn trace_records(result: &RunResult) -> Vec<TraceRecord> {
    let mut out = vec![TraceRecord::Header {
        schema: TRACE_SCHEMA.to_string(),
        config: result.config.clone(),
        manifest_hash: result.manifest_hash.clone(),
        prompt: result.prompt.clone(),
        initial_slots: result.initial_slots.clone(),
        frozen: result.frozen.clone(),
    }];
    for (snap, order) in result.per_iteration.iter().zip(&result.orders) {
        for (step, set) in snap.candidate_records.iter().enumerate() {
            out.push(TraceRecord::Candidate {
                iteration: snap.iteration,
                step,
                set: set.clone(),
            });
        }
        out.push(TraceRecord::Snapshot {
            iteration: snap.iteration,
            order: order.clone(),
            slots_after: snap.slots_after.clone(),
            text: snap.text.clone(),
            sentence_match_score: snap.sentence_match_score,
            converged: snap.converged,
        });
    }
    out.push(TraceRecord::Result {
        best_iteration: result.best_iteration,
        best_caption: result.best_caption.clone(),
        best_text: result.best_text.clone(),
        scorer_call_counts: result.scorer_call_counts,
    });
    out
}

pub fn write_trace<W: Write>(result: &RunResult, mut out: W) -> Result<(), Error> {
    for record in trace_records(result) {
        writeln!(out, "{}", json::to_line(&record)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn trace_string(result: &RunResult) -> Result<String, Error> {
    let mut buf = Vec::new();
    write_trace(result, &mut buf)?;
    Ok(String::from_utf8(buf).expect("canonical JSON is UTF-8"))
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceRecord>, Error> {
    let mut out = Vec::new();
    for (no, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidArgument(format!("trace line {}: {e}", no + 1)))?;
        if no == 0 {
            match &record {
                TraceRecord::Header { schema, .. } if schema == TRACE_SCHEMA => {}
                TraceRecord::Header { schema, .. } => {
                    return Err(Error::InvalidArgument(format!("unsupported trace schema {schema:?}")))
                }
                _ => return Err(Error::InvalidArgument("trace does not start with a header".into())),
            }
        }
        out.push(record);
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("empty trace".into()));
    }
    Ok(out)
}

/// Rebuilds the run from its trace records.
pub fn run_from_trace(records: &[TraceRecord]) -> Result<RunResult, Error> {
    let bad = |m: &str| Error::InvalidArgument(format!("malformed trace: {m}"));
    let mut iter = records.iter();
    let Some(TraceRecord::Header {
        config,
        manifest_hash,
        prompt,
        initial_slots,
        frozen,
        ..
    }) = iter.next()
    else {
        return Err(bad("missing header"));
    };
    let mut per_iteration = Vec::new();
    let mut orders = Vec::new();
    let mut pending: Vec<CandidateSet> = Vec::new();
    let mut tail = None;
    for r in iter {
        match r {
            TraceRecord::Candidate { set, .. } => pending.push(set.clone()),
            TraceRecord::Snapshot {
                iteration,
                order,
                slots_after,
                text,
                sentence_match_score,
                converged,
            } => {
                orders.push(order.clone());
                per_iteration.push(IterationSnapshot {
                    iteration: *iteration,
                    slots_after: slots_after.clone(),
                    text: text.clone(),
                    sentence_match_score: *sentence_match_score,
                    converged: *converged,
                    candidate_records: std::mem::take(&mut pending),
                });
            }
            TraceRecord::Result {
                best_iteration,
                best_caption,
                best_text,
                scorer_call_counts,
            } => tail = Some((*best_iteration, best_caption.clone(), best_text.clone(), *scorer_call_counts)),
            TraceRecord::Header { .. } => return Err(bad("second header")),
        }
    }
    let (best_iteration, best_caption, best_text, counts) = tail.ok_or_else(|| bad("missing result"))?;
    if per_iteration.is_empty() || best_iteration >= per_iteration.len() {
        return Err(bad("result points outside the snapshots"));
    }
    Ok(RunResult {
        config: config.clone(),
        manifest_hash: manifest_hash.clone(),
        prompt: prompt.clone(),
        initial_slots: initial_slots.clone(),
        frozen: frozen.clone(),
        orders,
        best_iteration,
        best_caption,
        best_text,
        per_iteration,
        scorer_call_counts: counts,
    })
}

/// One row per iteration: `(iteration, sentence score, best score so far)`.
pub fn score_series(result: &RunResult) -> Vec<(usize, f64, f64)> {
    let mut best = f64::NEG_INFINITY;
    result
        .per_iteration
        .iter()
        .map(|s| {
            best = best.max(s.sentence_match_score);
            (s.iteration, s.sentence_match_score, best)
        })
        .collect()
}
