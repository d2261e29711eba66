//! Run flags, TOML config files and their merge: flags override the file,
//! the file overrides the built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use gibbscap::{ControlTask, InitMode, OrderMode, RunConfig};

use crate::failure::{io_at, CliError};

/// Gamma used when a classifier control is requested without one.
pub const CONTROL_GAMMA: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderArg {
    Sequential,
    Shuffle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    AllMask,
    RandomTokens,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML file with run settings; flags take precedence over it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// synthetic:<fixture|dir>, remote:tcp://host:port, remote:stdio:<cmd>, remote, replay:<file>
    #[arg(long)]
    pub backend: Option<String>,
    /// Built-in image name or image file.
    #[arg(long)]
    pub image: Option<String>,
    /// Caption length n in slots.
    #[arg(long)]
    pub length: Option<usize>,
    /// Candidates per position.
    #[arg(long)]
    pub k: Option<usize>,
    /// Iterations T.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub match_temp: Option<f64>,
    #[arg(long)]
    pub control_temp: Option<f64>,
    #[arg(long, value_enum)]
    pub order: Option<OrderArg>,
    /// Draw a fresh shuffle every iteration.
    #[arg(long)]
    pub reshuffle: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub prompt: Option<String>,
    /// none, style:positive, style:negative, style:<name>, pos:<template>, pos-hard:<template>
    #[arg(long)]
    pub control: Option<String>,
    /// Clamp k to the vocabulary size instead of failing.
    #[arg(long)]
    pub clamp_k: bool,
    /// Keep the current token as an extra candidate when top-K misses it.
    #[arg(long)]
    pub keep_incumbent: bool,
    /// Renormalise top-K fluency probabilities to sum to one.
    #[arg(long)]
    pub renormalize: bool,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    /// Score snapshots on the caption alone, without the prompt.
    #[arg(long)]
    pub match_caption_only: bool,
    /// Write the run trace (JSON lines) here.
    #[arg(long, value_name = "FILE")]
    pub trace_out: Option<PathBuf>,
    /// Write the wire transcript here.
    #[arg(long, value_name = "FILE")]
    pub record_out: Option<PathBuf>,
}

/// Settings read from a `--config` file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FileConfig {
    pub backend: Option<String>,
    pub image: Option<String>,
    pub control: Option<String>,
    pub run: RunConfig,
    pub gamma_set: bool,
}

const RUN_KEYS: &[&str] = &[
    "n",
    "k",
    "iterations",
    "weights",
    "order_mode",
    "reshuffle_each_iter",
    "seed",
    "prompt_text",
    "init_mode",
    "include_prompt_in_match_text",
    "control_task",
    "options",
];

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::usage("config_file", e.to_string()))?;
        let mut take = |key: &str| -> Result<Option<String>, CliError> {
            match table.remove(key) {
                None => Ok(None),
                Some(toml::Value::String(s)) => Ok(Some(s)),
                Some(_) => Err(CliError::usage("config_file", format!("`{key}` must be a string"))),
            }
        };
        let backend = take("backend")?;
        let image = take("image")?;
        let control = take("control")?;
        if let Some(unknown) = table.keys().find(|k| !RUN_KEYS.contains(&k.as_str())) {
            return Err(CliError::usage("config_file", format!("unknown key `{unknown}`")));
        }
        let gamma_set = table
            .get("weights")
            .and_then(|w| w.as_table())
            .is_some_and(|w| w.contains_key("gamma"));
        let run: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::usage("config_file", e.to_string()))?;
        Ok(FileConfig {
            backend,
            image,
            control,
            run,
            gamma_set,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        Self::parse(&text).map_err(|mut e| {
            e.message = format!("{}: {}", path.display(), e.message);
            e
        })
    }
}

/// Effective settings after merging.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub backend: Option<String>,
    pub image: Option<String>,
}

/// Installs a control flag on `config`. A classifier task with no explicit
/// gamma gets [`CONTROL_GAMMA`].
pub fn apply_control(config: &mut RunConfig, flag: &str, gamma_set: bool) -> Result<(), CliError> {
    let task = ControlTask::parse_flag(flag)?;
    if task.uses_classifier() && !gamma_set && config.weights.gamma == 0.0 {
        log::info!("control {flag} without --gamma: using gamma = {CONTROL_GAMMA}");
        config.weights.gamma = CONTROL_GAMMA;
    }
    config.control_task = match task {
        ControlTask::None => None,
        t => Some(t),
    };
    Ok(())
}

impl RunArgs {
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let file = match &self.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let mut c = file.run;
        if let Some(v) = self.length {
            c.n = v;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.iters {
            c.iterations = v;
        }
        if let Some(v) = self.alpha {
            c.weights.alpha = v;
        }
        if let Some(v) = self.beta {
            c.weights.beta = v;
        }
        if let Some(v) = self.gamma {
            c.weights.gamma = v;
        }
        if let Some(v) = self.match_temp {
            c.weights.match_temperature = v;
        }
        if let Some(v) = self.control_temp {
            c.weights.control_temperature = v;
        }
        if let Some(o) = self.order {
            c.order_mode = match o {
                OrderArg::Sequential => OrderMode::Sequential,
                OrderArg::Shuffle => OrderMode::Shuffle,
            };
        }
        if let Some(i) = self.init {
            c.init_mode = match i {
                InitArg::AllMask => InitMode::AllMask,
                InitArg::RandomTokens => InitMode::RandomTokens,
            };
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(p) = &self.prompt {
            c.prompt_text = p.clone();
        }
        c.reshuffle_each_iter |= self.reshuffle;
        c.options.clamp_k |= self.clamp_k;
        c.options.keep_incumbent |= self.keep_incumbent;
        c.options.renormalize_bert |= self.renormalize;
        if self.match_caption_only {
            c.include_prompt_in_match_text = false;
        }
        if let Some(flag) = self.control.as_ref().or(file.control.as_ref()) {
            apply_control(&mut c, flag, file.gamma_set || self.gamma.is_some())?;
        }
        Ok(Resolved {
            config: c,
            backend: self.backend.clone().or(file.backend),
            image: self.image.clone().or(file.image),
        })
    }
}
