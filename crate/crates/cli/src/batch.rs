//! Batch runs over images and seeds.
//!
//! Output layout under `output_dir`:
//!
//! - `records/<job>.json`: one caption record per finished job, written to a
//!   temp file and renamed into place
//! - `completed.txt`: finished job ids, one per line; jobs listed here are
//!   skipped on rerun
//! - `captions.jsonl`: every record in job order
//! - `summary.json`: job counts, failures, summed call counts and the
//!   effective config

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use clap::Args;
use gibbscap::records::{read_records, CaptionRecord};
use gibbscap::{json, validate_config, CallCounts, RunConfig, ScorerBackend};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::backend::{AnyBackend, BackendSpec};
use crate::commands::{open_session, run_once, Session};
use crate::failure::{io_at, CliError};
use crate::settings::apply_control;

#[derive(Debug, Args)]
pub struct BatchArgs {
    /// Job specification (JSON).
    pub jobspec: PathBuf,
    /// Worker count; defaults to the number of cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Overrides the jobspec's output_dir.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides the jobspec's backend.
    #[arg(long)]
    pub backend: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub backend: Option<String>,
    #[serde(default)]
    pub images: Vec<String>,
    pub image_dir: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub repeat: Option<usize>,
    /// Partial run config; missing fields take the defaults.
    pub config: Option<Value>,
    pub control: Option<String>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub id: String,
    pub image: String,
    pub seed: u64,
}

fn sanitize(label: &str) -> String {
    let stem = Path::new(label)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| label.to_string());
    stem.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

impl JobSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage("jobspec", format!("{}: {e}", path.display())))
    }

    pub fn base_config(&self) -> Result<RunConfig, CliError> {
        let value = self.config.clone().unwrap_or_else(|| json!({}));
        let gamma_set = value.pointer("/weights/gamma").is_some();
        let mut config: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::usage("jobspec", format!("config: {e}")))?;
        if let Some(flag) = &self.control {
            apply_control(&mut config, flag, gamma_set)?;
        }
        Ok(config)
    }

    pub fn seeds(&self, base: u64) -> Result<Vec<u64>, CliError> {
        match (&self.seeds, self.repeat) {
            (Some(_), Some(_)) => Err(CliError::usage("jobspec", "give either seeds or repeat, not both")),
            (Some(s), None) => Ok(s.clone()),
            (None, Some(0)) => Err(CliError::usage("jobspec", "repeat must be at least 1")),
            (None, r) => Ok((0..r.unwrap_or(1) as u64).map(|i| base + i).collect()),
        }
    }

    pub fn images(&self) -> Result<Vec<String>, CliError> {
        let mut images = self.images.clone();
        if let Some(dir) = &self.image_dir {
            let mut files: Vec<String> = fs::read_dir(dir)
                .map_err(io_at(dir))?
                .filter_map(Result::ok)
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .map(|p| p.to_string_lossy().into_owned())
                .collect();
            files.sort();
            images.extend(files);
        }
        Ok(images)
    }

    pub fn jobs(&self, base_seed: u64) -> Result<Vec<Job>, CliError> {
        let seeds = self.seeds(base_seed)?;
        let mut jobs = Vec::new();
        let mut seen = BTreeSet::new();
        for image in self.images()? {
            for &seed in &seeds {
                let id = format!("{}-s{seed}", sanitize(&image));
                if !seen.insert(id.clone()) {
                    return Err(CliError::usage("jobspec", format!("duplicate job {id}")));
                }
                jobs.push(Job {
                    id,
                    image: image.clone(),
                    seed,
                });
            }
        }
        Ok(jobs)
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let name = path.file_name().expect("file path").to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, contents).map_err(io_at(&tmp))?;
    fs::rename(&tmp, path).map_err(io_at(path))
}

fn read_completed(path: &Path) -> Result<BTreeSet<String>, CliError> {
    if !path.exists() {
        return Ok(BTreeSet::new());
    }
    let file = File::open(path).map_err(io_at(path))?;
    let mut done = BTreeSet::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            done.insert(line.trim().to_string());
        }
    }
    Ok(done)
}

struct Shared<'a> {
    spec: &'a BackendSpec,
    config: &'a RunConfig,
    records: PathBuf,
    completed: Mutex<File>,
}

fn run_job(shared: &Shared, session: &mut Option<Session>, job: &Job) -> Result<(), CliError> {
    match session {
        Some(s) => s.backend.set_image(&shared.spec.image_bytes(&job.image)?)?,
        None => *session = Some(open_session(shared.spec, Some(&job.image), None)?),
    }
    let s = session.as_mut().expect("opened");
    let mut config = shared.config.clone();
    config.seed = job.seed;
    let result = run_once(&config, &mut s.backend, None)?;
    let record = CaptionRecord::from_run(&job.image, &result, s.backend.vocabulary());
    write_atomic(&shared.records.join(format!("{}.json", job.id)), &(record.to_line()? + "\n"))?;
    let mut done = shared.completed.lock().expect("completed log");
    writeln!(done, "{}", job.id)?;
    done.flush()?;
    Ok(())
}

/// Outcome counts, for callers and tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchReport {
    pub jobs: usize,
    pub resumed: usize,
    pub failed: usize,
}

pub fn batch(args: &BatchArgs) -> Result<BatchReport, CliError> {
    let spec_file = JobSpec::load(&args.jobspec)?;
    let config = spec_file.base_config()?;
    let jobs = spec_file.jobs(config.seed)?;
    if jobs.is_empty() {
        log::info!("jobspec lists no jobs");
        println!("{}", json!({ "jobs": 0 }));
        return Ok(BatchReport {
            jobs: 0,
            resumed: 0,
            failed: 0,
        });
    }
    let backend = BackendSpec::resolve(args.backend.as_deref().or(spec_file.backend.as_deref()))?;
    if backend.is_replay() {
        return Err(CliError::usage("backend", "replay backends hold one session and cannot drive a batch"));
    }
    let out = args
        .out
        .clone()
        .or_else(|| spec_file.output_dir.clone())
        .ok_or_else(|| CliError::usage("jobspec", "no output_dir"))?;

    // Fail fast on a config no job could run.
    {
        let probe: AnyBackend = backend.open(None)?;
        validate_config(&config, probe.vocabulary()).map_err(|issues| CliError::from(gibbscap::Error::Config(issues)))?;
    }

    let records = out.join("records");
    fs::create_dir_all(&records).map_err(io_at(&records))?;
    let completed_path = out.join("completed.txt");
    let done = read_completed(&completed_path)?;
    let pending: Vec<&Job> = jobs
        .iter()
        .filter(|j| !(done.contains(&j.id) && records.join(format!("{}.json", j.id)).is_file()))
        .collect();
    let resumed = jobs.len() - pending.len();
    if resumed > 0 {
        log::info!("resuming: {resumed} of {} jobs already complete", jobs.len());
    }

    let completed = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&completed_path)
        .map_err(io_at(&completed_path))?;
    let shared = Shared {
        spec: &backend,
        config: &config,
        records: records.clone(),
        completed: Mutex::new(completed),
    };
    let workers = args
        .jobs
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, pending.len().max(1));
    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<(usize, CliError)>> = Mutex::new(Vec::new());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let mut session = None;
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(job) = pending.get(i) else { break };
                    if let Err(e) = run_job(&shared, &mut session, job) {
                        log::warn!("job {} failed: {e}", job.id);
                        // the session may be unusable after a failure
                        session = None;
                        failures.lock().expect("failure list").push((i, e));
                    }
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("failure list");
    failures.sort_by_key(|(i, _)| *i);

    let mut merged = String::new();
    let mut calls = CallCounts::default();
    let mut succeeded = 0usize;
    for job in &jobs {
        let path = records.join(format!("{}.json", job.id));
        if !path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(io_at(&path))?;
        for record in read_records(text.as_bytes())? {
            calls = calls + record.calls;
            merged.push_str(&record.to_line()?);
            merged.push('\n');
        }
        succeeded += 1;
    }
    write_atomic(&out.join("captions.jsonl"), &merged)?;

    let failed: Vec<Value> = failures
        .iter()
        .map(|(i, e)| {
            let job = pending[*i];
            json!({ "job": job.id, "image": job.image, "seed": job.seed, "error": e.to_json()["error"] })
        })
        .collect();
    let summary = json!({
        "jobs": jobs.len(),
        "succeeded": succeeded,
        "failed": failed,
        "calls": calls,
        "backend": args.backend.as_deref().or(spec_file.backend.as_deref()),
        "config": config,
    });
    write_atomic(&out.join("summary.json"), &(json::value_to_line(&summary) + "\n"))?;

    let report = BatchReport {
        jobs: jobs.len(),
        resumed,
        failed: failures.len(),
    };
    if report.failed > 0 {
        return Err(CliError::runtime(
            "batch_failures",
            format!("{} of {} jobs failed; see summary.json", report.failed, report.jobs),
        )
        .with_details(json!({ "failed": failed })));
    }
    Ok(report)
}
