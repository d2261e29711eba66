//! Metric reports over caption record files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use gibbscap::metrics::{bleu_n, div_n, normalize_words, summarize, vocab_size, CaptionSet, ScoreSummary, ShortCaption};
use gibbscap::records::{read_records, CaptionRecord};
use gibbscap::json;
use serde::Serialize;

use crate::failure::{io_at, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Select {
    /// Best-of-iterations caption.
    Best,
    /// Caption after the final iteration.
    Last,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Caption record files (JSON lines).
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// JSON object mapping image id to a list of reference captions.
    #[arg(long, value_name = "FILE")]
    pub references: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "best")]
    pub select: Select,
    /// Highest n-gram order for BLEU.
    #[arg(long, default_value_t = 4)]
    pub bleu: usize,
    /// Skip captions shorter than n in Div-n instead of failing.
    #[arg(long)]
    pub skip_short: bool,
    /// Write the report as JSON here.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub captions: usize,
    pub images: usize,
    pub select: String,
    /// Per-image Div-n, averaged over images.
    pub div_1: f64,
    pub div_2: f64,
    pub vocab: usize,
    pub bleu_n: Option<usize>,
    pub bleu: Option<f64>,
    pub bleu_scored: usize,
    pub matcher: ScoreSummary,
}

impl Report {
    pub fn table(&self) -> String {
        let mut rows = vec![
            ("captions".to_string(), self.captions.to_string()),
            ("images".to_string(), self.images.to_string()),
            ("select".to_string(), self.select.clone()),
            ("div-1".to_string(), format!("{:.4}", self.div_1)),
            ("div-2".to_string(), format!("{:.4}", self.div_2)),
            ("vocab".to_string(), self.vocab.to_string()),
        ];
        if let (Some(n), Some(b)) = (self.bleu_n, self.bleu) {
            rows.push((format!("bleu-{n}"), format!("{b:.4} ({} captions)", self.bleu_scored)));
        }
        rows.push((
            "match score".to_string(),
            format!("{:.4} +/- {:.4}", self.matcher.mean, self.matcher.stddev),
        ));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<width$}  {v}\n")).collect()
    }
}

pub fn evaluate(
    records: &[CaptionRecord],
    references: Option<&BTreeMap<String, Vec<String>>>,
    select: Select,
    bleu: usize,
    short: ShortCaption,
) -> Result<Report, CliError> {
    if records.is_empty() {
        return Err(CliError::usage("empty_input", "no caption records to evaluate"));
    }
    let pick = |r: &CaptionRecord| match select {
        Select::Best => (r.caption.clone(), r.best_score),
        Select::Last => (r.last_caption.clone(), r.last_score),
    };
    let mut by_image: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for r in records {
        by_image.entry(&r.image).or_default().push(pick(r).0);
    }
    let sets: Vec<CaptionSet> = by_image.values().map(|c| CaptionSet::from_texts(c)).collect();
    let mean_div = |n: usize| -> Result<f64, CliError> {
        let mut total = 0.0;
        for s in &sets {
            total += div_n(s, n, short)?;
        }
        Ok(total / sets.len() as f64)
    };

    let (bleu_score, bleu_scored) = match references {
        None => (None, 0),
        Some(refs) => {
            let mut total = 0.0;
            let mut scored = 0usize;
            for image in by_image.keys().filter(|i| refs.get(**i).is_none_or(|l| l.is_empty())) {
                log::warn!("no references for image {image:?}");
            }
            for r in records {
                let Some(list) = refs.get(&r.image).filter(|l| !l.is_empty()) else {
                    continue;
                };
                let refs: Vec<Vec<String>> = list.iter().map(|t| normalize_words(t)).collect();
                total += bleu_n(&normalize_words(&pick(r).0), &refs, bleu)?;
                scored += 1;
            }
            if scored == 0 {
                return Err(CliError::usage("references", "no caption has references"));
            }
            (Some(total / scored as f64), scored)
        }
    };

    let scores: Vec<f64> = records.iter().map(|r| pick(r).1).collect();
    Ok(Report {
        captions: records.len(),
        images: sets.len(),
        select: match select {
            Select::Best => "best".into(),
            Select::Last => "last".into(),
        },
        div_1: mean_div(1)?,
        div_2: mean_div(2)?,
        vocab: vocab_size(&sets),
        bleu_n: references.map(|_| bleu),
        bleu: bleu_score,
        bleu_scored,
        matcher: summarize(&scores)?,
    })
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut records = Vec::new();
    for path in &args.files {
        let file = File::open(path).map_err(io_at(path))?;
        records.extend(read_records(BufReader::new(file)).map_err(|e| {
            let mut err = CliError::from(e);
            err.message = format!("{}: {}", path.display(), err.message);
            err
        })?);
    }
    let references = match &args.references {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_at(p))?;
            Some(
                serde_json::from_str::<BTreeMap<String, Vec<String>>>(&text)
                    .map_err(|e| CliError::usage("references", format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };
    let short = if args.skip_short {
        ShortCaption::Skip
    } else {
        ShortCaption::Error
    };
    let report = evaluate(&records, references.as_ref(), args.select, args.bleu, short)?;
    print!("{}", report.table());
    if let Some(p) = &args.out {
        fs::write(p, json::to_line(&report)? + "\n").map_err(io_at(p))?;
    }
    Ok(())
}
