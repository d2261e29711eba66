use serde::{Deserialize, Serialize};

use crate::control::ControlTask;
use crate::fusion::FusionWeights;
use crate::vocab::Vocabulary;

pub const CODE_N_RANGE: &str = "CODE_N_RANGE";
pub const CODE_K_RANGE: &str = "CODE_K_RANGE";
pub const CODE_T_RANGE: &str = "CODE_T_RANGE";
pub const CODE_TEMPERATURE: &str = "CODE_TEMPERATURE";
pub const CODE_WEIGHT_RANGE: &str = "CODE_WEIGHT_RANGE";
pub const CODE_NO_SIGNAL: &str = "CODE_NO_SIGNAL";
pub const CODE_GAMMA_WITHOUT_CONTROL: &str = "CODE_GAMMA_WITHOUT_CONTROL";
pub const CODE_CONTROL_SHAPE: &str = "CODE_CONTROL_SHAPE";
pub const CODE_NOTHING_TO_EDIT: &str = "CODE_NOTHING_TO_EDIT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    Sequential,
    #[default]
    Shuffle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    AllMask,
    RandomTokens,
}

/// Switches for behaviour the base algorithm leaves open. All default off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineOptions {
    /// Clamp `k` to the vocabulary size instead of rejecting the config.
    pub clamp_k: bool,
    /// Append the incumbent token as an extra candidate when top-K misses it.
    pub keep_incumbent: bool,
    /// Renormalise the top-K fluency probabilities to sum to one.
    pub renormalize_bert: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub n: usize,
    pub k: usize,
    pub iterations: usize,
    pub weights: FusionWeights,
    pub order_mode: OrderMode,
    pub reshuffle_each_iter: bool,
    pub seed: u64,
    pub prompt_text: String,
    pub init_mode: InitMode,
    pub include_prompt_in_match_text: bool,
    pub control_task: Option<ControlTask>,
    pub options: EngineOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n: 12,
            k: 200,
            iterations: 15,
            weights: FusionWeights::default(),
            order_mode: OrderMode::Shuffle,
            reshuffle_each_iter: false,
            seed: 0,
            prompt_text: "Image of".to_string(),
            init_mode: InitMode::AllMask,
            include_prompt_in_match_text: true,
            control_task: None,
            options: EngineOptions::default(),
        }
    }
}

impl RunConfig {
    /// Candidate count actually used against `vocab`.
    pub fn effective_k(&self, vocab: &Vocabulary) -> usize {
        if self.options.clamp_k {
            self.k.min(vocab.size())
        } else {
            self.k
        }
    }

    pub fn uses_control(&self) -> bool {
        self.weights.gamma > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigIssue {
    pub code: String,
    pub message: String,
}

impl ConfigIssue {
    fn new(code: &str, message: impl Into<String>) -> Self {
        ConfigIssue {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

/// Checks a config against a vocabulary, reporting every violation.
pub fn validate_config(config: &RunConfig, vocab: &Vocabulary) -> Result<(), Vec<ConfigIssue>> {
    let mut issues = Vec::new();
    let infill = match &config.control_task {
        Some(ControlTask::Infill(spec)) => Some(spec),
        _ => None,
    };

    if config.n < 1 {
        issues.push(ConfigIssue::new(CODE_N_RANGE, "n must be at least 1"));
    }
    if config.k < 1 {
        issues.push(ConfigIssue::new(CODE_K_RANGE, "k must be at least 1"));
    } else if config.k > vocab.size() && !config.options.clamp_k {
        issues.push(ConfigIssue::new(
            CODE_K_RANGE,
            format!("k = {} exceeds vocabulary size {} (enable clamp_k to clamp)", config.k, vocab.size()),
        ));
    }
    if config.iterations < 1 {
        issues.push(ConfigIssue::new(CODE_T_RANGE, "iterations must be at least 1"));
    }

    let w = &config.weights;
    for (name, t) in [
        ("match_temperature", w.match_temperature),
        ("control_temperature", w.control_temperature),
    ] {
        if !(t > 0.0 && t.is_finite()) {
            issues.push(ConfigIssue::new(CODE_TEMPERATURE, format!("{name} must be positive, got {t}")));
        }
    }
    let mut weights_ok = true;
    for (name, v) in [("alpha", w.alpha), ("beta", w.beta), ("gamma", w.gamma)] {
        if !(v >= 0.0 && v.is_finite()) {
            weights_ok = false;
            issues.push(ConfigIssue::new(
                CODE_WEIGHT_RANGE,
                format!("{name} must be a nonnegative finite number, got {v}"),
            ));
        }
    }
    if weights_ok && w.alpha == 0.0 && w.beta == 0.0 && w.gamma == 0.0 {
        issues.push(ConfigIssue::new(CODE_NO_SIGNAL, "alpha, beta and gamma are all zero"));
    }

    let classifier = config.control_task.as_ref().is_some_and(ControlTask::uses_classifier);
    if w.gamma > 0.0 && !classifier {
        issues.push(ConfigIssue::new(
            CODE_GAMMA_WITHOUT_CONTROL,
            "gamma > 0 needs a style or pos control task",
        ));
    }

    match &config.control_task {
        Some(ControlTask::Pos { template, .. }) if template.len() != config.n => {
            issues.push(ConfigIssue::new(
                CODE_CONTROL_SHAPE,
                format!("POS template has {} slots but n = {}", template.len(), config.n),
            ));
        }
        Some(ControlTask::Length { target }) if *target != config.n => {
            issues.push(ConfigIssue::new(
                CODE_CONTROL_SHAPE,
                format!("length target {target} differs from n = {}", config.n),
            ));
        }
        _ => {}
    }

    if let Some(spec) = infill {
        if spec.reference_tokens.len() != config.n {
            issues.push(ConfigIssue::new(
                CODE_CONTROL_SHAPE,
                format!("infill reference has {} tokens but n = {}", spec.reference_tokens.len(), config.n),
            ));
        }
        if spec.editable_positions.is_empty() {
            issues.push(ConfigIssue::new(CODE_NOTHING_TO_EDIT, "no editable positions"));
        }
        if spec.editable_positions.iter().any(|&p| p >= spec.reference_tokens.len()) {
            issues.push(ConfigIssue::new(CODE_CONTROL_SHAPE, "editable position outside the reference"));
        }
        if let Some(&bad) = spec.reference_tokens.iter().find(|&&t| !vocab.contains(t)) {
            issues.push(ConfigIssue::new(
                CODE_CONTROL_SHAPE,
                format!("reference token {bad} outside the vocabulary"),
            ));
        }
    }

    if issues.is_empty() {
        Ok(())
    } else {
        Err(issues)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{InfillSpec, StyleTarget};

    fn vocab(size: usize) -> Vocabulary {
        Vocabulary::new((0..size).map(|i| format!("w{i}")).collect(), 0, None).unwrap()
    }

    fn codes(r: Result<(), Vec<ConfigIssue>>) -> Vec<String> {
        r.err().unwrap_or_default().into_iter().map(|i| i.code).collect()
    }

    #[test]
    fn defaults_accepted() {
        let c = RunConfig::default();
        assert_eq!((c.k, c.iterations, c.n), (200, 15, 12));
        assert_eq!((c.weights.alpha, c.weights.beta), (0.02, 2.0));
        assert!(validate_config(&c, &vocab(30522)).is_ok());
        assert!(validate_config(&c, &vocab(200)).is_ok());
    }

    #[test]
    fn gamma_five_with_style() {
        let mut c = RunConfig::default();
        c.weights.gamma = 5.0;
        assert_eq!(codes(validate_config(&c, &vocab(300))), vec![CODE_GAMMA_WITHOUT_CONTROL]);
        c.control_task = Some(ControlTask::Style { target: StyleTarget::Positive });
        assert!(validate_config(&c, &vocab(300)).is_ok());
    }

    #[test]
    fn range_errors() {
        let c = RunConfig { k: 0, ..Default::default() };
        assert_eq!(codes(validate_config(&c, &vocab(300))), vec![CODE_K_RANGE]);
        let c = RunConfig { k: 301, ..Default::default() };
        assert_eq!(codes(validate_config(&c, &vocab(300))), vec![CODE_K_RANGE]);
        let mut c = RunConfig { k: 301, ..Default::default() };
        c.options.clamp_k = true;
        assert!(validate_config(&c, &vocab(300)).is_ok());
        assert_eq!(c.effective_k(&vocab(300)), 300);
        let c = RunConfig { n: 0, iterations: 0, ..Default::default() };
        assert_eq!(codes(validate_config(&c, &vocab(300))), vec![CODE_N_RANGE, CODE_T_RANGE]);
    }

    #[test]
    fn zero_weights_and_temperatures() {
        let mut c = RunConfig::default();
        c.weights = FusionWeights::new(0.0, 0.0, 0.0);
        assert_eq!(codes(validate_config(&c, &vocab(300))), vec![CODE_NO_SIGNAL]);
        let mut c = RunConfig::default();
        c.weights.match_temperature = 0.0;
        c.weights.alpha = -1.0;
        assert_eq!(
            codes(validate_config(&c, &vocab(300))),
            vec![CODE_TEMPERATURE, CODE_WEIGHT_RANGE]
        );
    }

    #[test]
    fn infill_shape() {
        let spec = InfillSpec::new(vec![1, 2, 3], [1]).unwrap();
        let c = RunConfig {
            n: 3,
            control_task: Some(ControlTask::Infill(spec)),
            ..Default::default()
        };
        assert!(validate_config(&c, &vocab(300)).is_ok());
        let c = RunConfig { n: 4, ..c };
        assert_eq!(codes(validate_config(&c, &vocab(300))), vec![CODE_CONTROL_SHAPE]);
    }

    #[test]
    fn config_serde_round_trip() {
        let c = RunConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), c);
        let partial: RunConfig = serde_json::from_str(r#"{"k": 7}"#).unwrap();
        assert_eq!(partial.k, 7);
        assert_eq!(partial.iterations, 15);
    }
}
