//! Control tasks: length, infilling, sentiment style and part-of-speech
//! templates, plus the lexicon/template scorers that need no remote model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::config::RunConfig;
use crate::error::Error;
use crate::metrics::normalize_words;
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlTask {
    None,
    Length { target: usize },
    Infill(InfillSpec),
    Style { target: StyleTarget },
    Pos {
        template: PosTemplate,
        #[serde(default)]
        hard: bool,
    },
}

impl ControlTask {
    /// Whether the task is scored by a classifier (and so needs `gamma > 0`).
    pub fn uses_classifier(&self) -> bool {
        matches!(self, ControlTask::Style { .. } | ControlTask::Pos { .. })
    }

    /// Task tag sent to control scorers, e.g. `style:positive`.
    pub fn tag(&self) -> Option<String> {
        match self {
            ControlTask::Style { target } => Some(format!("style:{target}")),
            ControlTask::Pos { template, hard: false } => Some(format!("pos:{template}")),
            ControlTask::Pos { template, hard: true } => Some(format!("pos-hard:{template}")),
            _ => None,
        }
    }

    /// Parses a control flag: `none`, `style:<target>`, `pos:<template>` or
    /// `pos-hard:<template>`.
    pub fn parse_flag(flag: &str) -> Result<ControlTask, Error> {
        let flag = flag.trim();
        if flag.is_empty() || flag == "none" {
            return Ok(ControlTask::None);
        }
        let (kind, rest) = flag
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("unrecognised control {flag:?}")))?;
        match kind {
            "style" => Ok(ControlTask::Style {
                target: rest.parse()?,
            }),
            "pos" => Ok(ControlTask::Pos {
                template: rest.parse()?,
                hard: false,
            }),
            "pos-hard" => Ok(ControlTask::Pos {
                template: rest.parse()?,
                hard: true,
            }),
            _ => Err(Error::InvalidArgument(format!("unrecognised control kind {kind:?}"))),
        }
    }
}

/// Style target. `positive`/`negative` are lexicon-scorable; any other name
/// (e.g. `romantic`) is passed through to a remote classifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StyleTarget {
    Positive,
    Negative,
    Named(String),
}

impl StyleTarget {
    pub fn polarity(&self) -> Option<Polarity> {
        match self {
            StyleTarget::Positive => Some(Polarity::Positive),
            StyleTarget::Negative => Some(Polarity::Negative),
            StyleTarget::Named(_) => None,
        }
    }
}

impl fmt::Display for StyleTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StyleTarget::Positive => f.write_str("positive"),
            StyleTarget::Negative => f.write_str("negative"),
            StyleTarget::Named(n) => f.write_str(n),
        }
    }
}

impl FromStr for StyleTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim() {
            "positive" => Ok(StyleTarget::Positive),
            "negative" => Ok(StyleTarget::Negative),
            "" => Err(Error::InvalidArgument("empty style target".into())),
            other if other.contains(char::is_whitespace) => {
                Err(Error::InvalidArgument(format!("style target {other:?} contains whitespace")))
            }
            other => Ok(StyleTarget::Named(other.to_string())),
        }
    }
}

impl Serialize for StyleTarget {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StyleTarget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

/// Reference caption plus the slots the generator may rewrite; every other
/// slot is frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfillSpec {
    pub reference_tokens: Vec<TokenId>,
    pub editable_positions: BTreeSet<usize>,
}

impl InfillSpec {
    pub fn new(reference_tokens: Vec<TokenId>, editable_positions: impl IntoIterator<Item = usize>) -> Result<Self, Error> {
        let spec = InfillSpec {
            reference_tokens,
            editable_positions: editable_positions.into_iter().collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Marks `round(ratio * len)` randomly chosen positions editable (at
    /// least one).
    pub fn with_corruption<R: Rng + ?Sized>(reference_tokens: Vec<TokenId>, ratio: f64, rng: &mut R) -> Result<Self, Error> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!("corruption ratio {ratio} outside (0, 1]")));
        }
        let len = reference_tokens.len();
        if len == 0 {
            return Err(Error::InvalidArgument("empty reference".into()));
        }
        let count = ((ratio * len as f64).round() as usize).clamp(1, len);
        let picked = index::sample(rng, len, count).into_vec();
        Self::new(reference_tokens, picked)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.reference_tokens.is_empty() {
            return Err(Error::InvalidArgument("empty reference".into()));
        }
        if self.editable_positions.is_empty() {
            return Err(Error::NothingToEdit);
        }
        if let Some(&p) = self.editable_positions.iter().next_back() {
            if p >= self.reference_tokens.len() {
                return Err(Error::InvalidArgument(format!(
                    "editable position {p} outside reference of length {}",
                    self.reference_tokens.len()
                )));
            }
        }
        Ok(())
    }

    pub fn frozen_mask(&self) -> Vec<bool> {
        (0..self.reference_tokens.len())
            .map(|i| !self.editable_positions.contains(&i))
            .collect()
    }
}

/// Per-slot allowed tag sets, written `DET ADJ/NOUN NOUN ...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosTemplate {
    tags: Vec<Vec<String>>,
}

impl PosTemplate {
    pub fn new(tags: Vec<Vec<String>>) -> Result<Self, Error> {
        if tags.is_empty() {
            return Err(Error::InvalidArgument("empty POS template".into()));
        }
        if tags.iter().any(|alts| alts.is_empty() || alts.iter().any(|t| t.is_empty())) {
            return Err(Error::InvalidArgument("POS template has an empty tag".into()));
        }
        Ok(PosTemplate { tags })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn allowed(&self, i: usize) -> &[String] {
        &self.tags[i]
    }

    pub fn allows(&self, i: usize, tag: &str) -> bool {
        self.tags.get(i).is_some_and(|alts| alts.iter().any(|a| a == tag))
    }
}

impl fmt::Display for PosTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, alts) in self.tags.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(&alts.join("/"))?;
        }
        Ok(())
    }
}

impl FromStr for PosTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        PosTemplate::new(
            s.split_whitespace()
                .map(|slot| slot.split('/').map(str::to_string).collect())
                .collect(),
        )
    }
}

impl Serialize for PosTemplate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PosTemplate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Word polarity table, values in `[-1, 1]`; unknown words score 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SentimentLexicon {
    polarity: BTreeMap<String, f64>,
}

const BUILTIN_LEXICON: &str = include_str!("../fixtures/lexicon.tsv");

impl SentimentLexicon {
    pub fn new(entries: impl IntoIterator<Item = (String, f64)>) -> Result<Self, Error> {
        let mut polarity = BTreeMap::new();
        for (word, value) in entries {
            if !(-1.0..=1.0).contains(&value) {
                return Err(Error::Fixture(format!("polarity {value} of {word:?} outside [-1, 1]")));
            }
            polarity.insert(word.to_lowercase(), value);
        }
        Ok(SentimentLexicon { polarity })
    }

    /// Small built-in lexicon used by tests and the demo.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_LEXICON).expect("built-in lexicon is valid")
    }

    /// Parses `word<TAB>polarity` lines; blank lines and `#` comments skipped.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, value) = line
                .split_once('\t')
                .ok_or_else(|| Error::Fixture(format!("lexicon line {}: expected word<TAB>polarity", lineno + 1)))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Fixture(format!("lexicon line {}: bad polarity {value:?}", lineno + 1)))?;
            entries.push((word.trim().to_string(), value));
        }
        Self::new(entries)
    }

    pub fn to_tsv(&self) -> String {
        self.polarity.iter().map(|(w, v)| format!("{w}\t{v}\n")).collect()
    }

    pub fn polarity(&self, word: &str) -> f64 {
        self.polarity.get(&word.to_lowercase()).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.polarity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polarity.is_empty()
    }
}

/// Sets the caption length and drops any classifier signal. Realised word
/// counts can still drift when the backend's pieces split words.
pub fn build_length_task(n: usize, base: &RunConfig) -> Result<RunConfig, Error> {
    if n < 1 {
        return Err(Error::InvalidArgument("length target must be at least 1".into()));
    }
    let mut config = base.clone();
    config.n = n;
    config.weights.gamma = 0.0;
    config.control_task = Some(ControlTask::Length { target: n });
    Ok(config)
}

/// Canvas initialised from the reference with only the editable slots open.
pub fn build_infill_task(spec: InfillSpec, base: &RunConfig) -> Result<RunConfig, Error> {
    spec.validate()?;
    let mut config = base.clone();
    config.n = spec.reference_tokens.len();
    config.weights.gamma = 0.0;
    config.control_task = Some(ControlTask::Infill(spec));
    Ok(config)
}

/// Mean word polarity per text, negated for a negative target.
pub fn sentiment_scores<S: AsRef<str>>(texts: &[S], lexicon: &SentimentLexicon, target: Polarity) -> Vec<f64> {
    texts
        .iter()
        .map(|text| {
            let words = normalize_words(text.as_ref());
            let mean = if words.is_empty() {
                0.0
            } else {
                words.iter().map(|w| lexicon.polarity(w)).sum::<f64>() / words.len() as f64
            };
            match target {
                Polarity::Positive => mean,
                Polarity::Negative => -mean,
            }
        })
        .collect()
}

/// Fraction of slots whose tag is allowed by the template.
pub fn pos_match_scores<S: AsRef<str>>(tagged: &[Vec<S>], template: &PosTemplate) -> Result<Vec<f64>, Error> {
    tagged
        .iter()
        .map(|tags| {
            if tags.len() != template.len() {
                return Err(Error::InvalidArgument(format!(
                    "tag sequence of length {} against template of length {}",
                    tags.len(),
                    template.len()
                )));
            }
            let hits = tags
                .iter()
                .enumerate()
                .filter(|(i, t)| template.allows(*i, t.as_ref()))
                .count();
            Ok(hits as f64 / template.len() as f64)
        })
        .collect()
}
