//! Score fusion: temperature softmax over candidate scores and the linear
//! mix of fluency, match and control probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, NumericError};
use crate::vocab::TokenId;

/// Trade-off weights and softmax temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub match_temperature: f64,
    pub control_temperature: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights {
            alpha: 0.02,
            beta: 2.0,
            gamma: 0.0,
            match_temperature: 1.0,
            control_temperature: 1.0,
        }
    }
}

impl FusionWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        FusionWeights {
            alpha,
            beta,
            gamma,
            ..Default::default()
        }
    }
}

/// Temperature softmax with max subtraction.
///
/// `-inf` entries get zero mass as long as one entry is finite. NaN and
/// `+inf` are rejected.
pub fn softmax(scores: &[f64], temperature: f64) -> Result<Vec<f64>, Error> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    let mut max = f64::NEG_INFINITY;
    for (index, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            return Err(NumericError::NaN(index).into());
        }
        if s == f64::INFINITY {
            return Err(NumericError::NonFinite { index, value: s }.into());
        }
        if s > max {
            max = s;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(NumericError::NoFiniteEntry.into());
    }
    let exps: Vec<f64> = scores.iter().map(|&s| libm::exp((s - max) / temperature)).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `alpha * p_bert + beta * p_clip + gamma * p_cls`, elementwise, unnormalised.
pub fn fuse(p_bert: &[f64], p_clip: &[f64], p_cls: &[f64], weights: &FusionWeights) -> Result<Vec<f64>, Error> {
    if p_bert.len() != p_clip.len() || p_bert.len() != p_cls.len() {
        return Err(Error::InvalidArgument(format!(
            "fusion inputs differ in length: {} / {} / {}",
            p_bert.len(),
            p_clip.len(),
            p_cls.len()
        )));
    }
    Ok(p_bert
        .iter()
        .zip(p_clip)
        .zip(p_cls)
        .map(|((&b, &c), &d)| weights.alpha * b + weights.beta * c + weights.gamma * d)
        .collect())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn select_argmax(values: &[f64]) -> Result<usize, Error> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("argmax of an empty vector".into()));
    }
    let mut best = 0;
    for (index, &v) in values.iter().enumerate() {
        if v.is_nan() {
            return Err(NumericError::NaN(index).into());
        }
        if v > values[best] {
            best = index;
        }
    }
    Ok(best)
}

/// The K candidates considered at one position, with every score vector that
/// went into the decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub position: usize,
    pub token_ids: Vec<TokenId>,
    pub p_bert: Vec<f64>,
    pub p_clip: Vec<f64>,
    pub p_cls: Vec<f64>,
    pub fused: Vec<f64>,
    pub chosen: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn chosen_token(&self) -> TokenId {
        self.token_ids[self.chosen]
    }

    /// Recomputes fusion and argmax and checks the stored vectors against them.
    pub fn check(&self, weights: &FusionWeights) -> Result<(), String> {
        let k = self.token_ids.len();
        if k == 0 {
            return Err("empty candidate set".into());
        }
        for (name, v) in [
            ("p_bert", &self.p_bert),
            ("p_clip", &self.p_clip),
            ("p_cls", &self.p_cls),
            ("fused", &self.fused),
        ] {
            if v.len() != k {
                return Err(format!("{name} has length {} but K = {k}", v.len()));
            }
        }
        let sum_clip: f64 = self.p_clip.iter().sum();
        if weights.beta > 0.0 && (sum_clip - 1.0).abs() > 1e-9 {
            return Err(format!("p_clip sums to {sum_clip}"));
        }
        let sum_cls: f64 = self.p_cls.iter().sum();
        if weights.gamma > 0.0 && (sum_cls - 1.0).abs() > 1e-9 {
            return Err(format!("p_cls sums to {sum_cls}"));
        }
        let refused = fuse(&self.p_bert, &self.p_clip, &self.p_cls, weights).map_err(|e| e.to_string())?;
        if refused.iter().zip(&self.fused).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err("fused vector does not match recomputation".into());
        }
        let chosen = select_argmax(&self.fused).map_err(|e| e.to_string())?;
        if chosen != self.chosen {
            return Err(format!("chosen {} but argmax is {chosen}", self.chosen));
        }
        Ok(())
    }
}
