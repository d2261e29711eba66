//! Single-run commands plus trace export and the synthetic server.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use clap::Args;
use gibbscap::control::build_infill_task;
use gibbscap::engine::engine_rng;
use gibbscap::protocol::SyntheticServer;
use gibbscap::records::CaptionRecord;
use gibbscap::trace::{read_trace, run_from_trace, score_series, trace_string};
use gibbscap::{run, InfillSpec, RunConfig, RunResult, ScorerBackend};
use serde_json::json;

use crate::backend::{AnyBackend, BackendSpec};
use crate::failure::{io_at, CliError};
use crate::settings::{Resolved, RunArgs};

/// An open backend with its image installed.
pub struct Session {
    pub backend: AnyBackend,
    pub image: String,
}

pub fn open_session(spec: &BackendSpec, image: Option<&str>, record: Option<&Path>) -> Result<Session, CliError> {
    let mut backend = spec.open(record)?;
    let image = match image.or(spec.default_image()) {
        Some(name) => {
            backend.set_image(&spec.image_bytes(name)?)?;
            name.to_string()
        }
        None if backend.has_image() => String::new(),
        None => return Err(CliError::usage("image", "this backend needs --image")),
    };
    Ok(Session { backend, image })
}

/// Runs one config, writing the trace when asked.
pub fn run_once(config: &RunConfig, backend: &mut AnyBackend, trace_out: Option<&Path>) -> Result<RunResult, CliError> {
    match run(config, backend) {
        Ok(result) => {
            if let Some(p) = trace_out {
                fs::write(p, trace_string(&result)?).map_err(io_at(p))?;
            }
            Ok(result)
        }
        Err(failure) => {
            let completed = failure.partial.len();
            let mut err = CliError::from(failure.error);
            let mut details = err.details.take().unwrap_or_else(|| json!({}));
            details["completed_iterations"] = json!(completed);
            details["calls"] = json!(failure.scorer_call_counts);
            Err(err.with_details(details))
        }
    }
}

fn print_record(record: &CaptionRecord, text_only: bool) -> Result<(), CliError> {
    let mut out = io::stdout().lock();
    if text_only {
        writeln!(out, "{}", record.highlighted.as_deref().unwrap_or(&record.caption))?;
    } else {
        writeln!(out, "{}", record.to_line()?)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Print only the caption text.
    #[arg(long)]
    pub text_only: bool,
}

pub fn caption(args: &CaptionArgs) -> Result<(), CliError> {
    let Resolved { config, backend, image } = args.run.resolve()?;
    let spec = BackendSpec::resolve(backend.as_deref())?;
    let mut session = open_session(&spec, image.as_deref(), args.run.record_out.as_deref())?;
    let result = run_once(&config, &mut session.backend, args.run.trace_out.as_deref())?;
    let record = CaptionRecord::from_run(&session.image, &result, session.backend.vocabulary());
    print_record(&record, args.text_only)
}

#[derive(Debug, Args)]
pub struct InfillArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Reference caption, whitespace separated.
    #[arg(long)]
    pub text: String,
    /// Zero-based slots to rewrite, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["mask_tokens", "corrupt_ratio"])]
    pub mask_positions: Vec<usize>,
    /// Rewrite every slot holding one of these words, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "corrupt_ratio")]
    pub mask_tokens: Vec<String>,
    /// Rewrite this fraction of slots, chosen with the run seed.
    #[arg(long)]
    pub corrupt_ratio: Option<f64>,
    #[arg(long)]
    pub text_only: bool,
}

pub fn infill_spec(args: &InfillArgs, reference: Vec<gibbscap::TokenId>, seed: u64) -> Result<InfillSpec, CliError> {
    let words: Vec<String> = args.text.split_whitespace().map(str::to_lowercase).collect();
    let positions: BTreeSet<usize> = if let Some(ratio) = args.corrupt_ratio {
        return Ok(InfillSpec::with_corruption(reference, ratio, &mut engine_rng(seed))?);
    } else if !args.mask_tokens.is_empty() {
        let targets: BTreeSet<String> = args.mask_tokens.iter().map(|w| w.trim().to_lowercase()).collect();
        words
            .iter()
            .enumerate()
            .filter(|(_, w)| targets.contains(*w))
            .map(|(i, _)| i)
            .collect()
    } else {
        args.mask_positions.iter().copied().collect()
    };
    if positions.is_empty() {
        return Err(CliError::usage(
            "nothing_to_edit",
            "no masked positions: give --mask-positions, matching --mask-tokens or --corrupt-ratio",
        ));
    }
    Ok(InfillSpec::new(reference, positions)?)
}

pub fn infill(args: &InfillArgs) -> Result<(), CliError> {
    let Resolved { config, backend, image } = args.run.resolve()?;
    let spec = BackendSpec::resolve(backend.as_deref())?;
    let mut session = open_session(&spec, image.as_deref(), args.run.record_out.as_deref())?;
    let reference = session.backend.vocabulary().encode_words(&args.text)?;
    let infill = infill_spec(args, reference, config.seed)?;
    let config = build_infill_task(infill, &config)?;
    let result = run_once(&config, &mut session.backend, args.run.trace_out.as_deref())?;
    let record = CaptionRecord::from_run(&session.image, &result, session.backend.vocabulary());
    print_record(&record, args.text_only)
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// Trace file written by --trace-out.
    pub file: PathBuf,
    /// Write the iteration, score and best-so-far columns as CSV here.
    #[arg(long, value_name = "FILE")]
    pub plot_data: Option<PathBuf>,
}

pub fn series_csv(result: &RunResult) -> String {
    let mut out = String::from("iteration,score,best_so_far\n");
    for (it, score, best) in score_series(result) {
        out.push_str(&format!("{it},{score},{best}\n"));
    }
    out
}

pub fn trace(args: &TraceArgs) -> Result<(), CliError> {
    let file = File::open(&args.file).map_err(io_at(&args.file))?;
    let records = read_trace(BufReader::new(file))?;
    let result = run_from_trace(&records)?;
    let csv = series_csv(&result);
    match &args.plot_data {
        Some(p) => {
            fs::write(p, &csv).map_err(io_at(p))?;
            println!(
                "{} iterations, best {:?} at iteration {}",
                result.per_iteration.len(),
                result.best_text,
                result.best_iteration
            );
        }
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Built-in fixture name or fixture directory.
    #[arg(long, default_value = "scenes")]
    pub fixture: String,
    /// Listen on this TCP address instead of serving stdin/stdout.
    #[arg(long, value_name = "ADDR")]
    pub listen: Option<String>,
}

pub fn serve(args: &ServeArgs) -> Result<(), CliError> {
    let spec = BackendSpec::parse(&format!("synthetic:{}", args.fixture))?;
    let AnyBackend::Synthetic(backend) = spec.open(None)? else {
        unreachable!("synthetic spec opens locally")
    };
    let mut server = SyntheticServer::new(backend);
    match &args.listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr).map_err(|e| CliError::runtime("io", format!("{addr}: {e}")))?;
            eprintln!("listening on {}", listener.local_addr()?);
            server.serve_tcp(listener)?;
        }
        None => server.serve(io::stdin().lock(), io::stdout().lock())?,
    }
    Ok(())
}
