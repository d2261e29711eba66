//! Deterministic table-backed scorers for desk-scale verification.
//!
//! A fixture directory holds `mlm.txt` (see [`TableMlm`]), and optionally
//! `lexicon.tsv` (sentiment, `word<TAB>polarity`) and `tags.tsv`
//! (part-of-speech, `word<TAB>TAG`). Images are [`BagMatcher`] files,
//! conventionally `*.bag`, registered separately.

mod bag;
mod table;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

pub use bag::BagMatcher;
pub use table::{ContextKey, Neighbor, TableMlm, MAX_TOY_VOCAB};

use crate::backend::{BackendManifest, CandidateText, ScorerBackend, PROTOCOL_VERSION};
use crate::control::{pos_match_scores, sentiment_scores, ControlTask, SentimentLexicon};
use crate::error::{Error, ScorerError};
use crate::metrics::normalize_words;
use crate::vocab::{TokenId, Vocabulary};

/// Built-in fixture sets, keyed by name.
pub mod fixtures {
    pub struct Fixture {
        pub name: &'static str,
        pub mlm: &'static str,
        pub tags: Option<&'static str>,
        pub lexicon: Option<&'static str>,
        pub images: &'static [(&'static str, &'static str)],
    }

    pub const TOY7: Fixture = Fixture {
        name: "toy7",
        mlm: include_str!("../../fixtures/toy7/mlm.txt"),
        tags: Some(include_str!("../../fixtures/toy7/tags.tsv")),
        lexicon: Some(include_str!("../../fixtures/toy7/lexicon.tsv")),
        images: &[
            ("cat", include_str!("../../fixtures/toy7/cat.bag")),
            ("dog", include_str!("../../fixtures/toy7/dog.bag")),
        ],
    };

    pub const TWO_MODE: Fixture = Fixture {
        name: "two_mode",
        mlm: include_str!("../../fixtures/two_mode/mlm.txt"),
        tags: None,
        lexicon: None,
        images: &[("pets", include_str!("../../fixtures/two_mode/pets.bag"))],
    };

    pub const SCENES: Fixture = Fixture {
        name: "scenes",
        mlm: include_str!("../../fixtures/scenes/mlm.txt"),
        tags: Some(include_str!("../../fixtures/scenes/tags.tsv")),
        lexicon: None,
        images: &[
            ("cat_on_bed", include_str!("../../fixtures/scenes/cat_on_bed.bag")),
            ("dog_in_grass", include_str!("../../fixtures/scenes/dog_in_grass.bag")),
            ("bird_in_sky", include_str!("../../fixtures/scenes/bird_in_sky.bag")),
            ("man_on_street", include_str!("../../fixtures/scenes/man_on_street.bag")),
        ],
    };

    pub const ALL: [&Fixture; 3] = [&TOY7, &TWO_MODE, &SCENES];

    pub fn by_name(name: &str) -> Option<&'static Fixture> {
        ALL.into_iter().find(|f| f.name == name)
    }
}

/// `word<TAB>TAG` table. Unknown words tag as `X`, the mask as `[MASK]`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagLexicon {
    tags: BTreeMap<String, String>,
}

impl TagLexicon {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut tags = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (w, t) = line
                .split_once('\t')
                .ok_or_else(|| Error::Fixture(format!("tags line {}: expected word<TAB>TAG", no + 1)))?;
            tags.insert(w.trim().to_lowercase(), t.trim().to_string());
        }
        Ok(TagLexicon { tags })
    }

    pub fn tag(&self, word: &str) -> &str {
        self.tags.get(&word.to_lowercase()).map_or("X", String::as_str)
    }
}

fn short_digest(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

/// Scorer backend over a [`TableMlm`], bag images, a sentiment lexicon and
/// a tag table.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    mlm: TableMlm,
    mlm_digest: String,
    lexicon: SentimentLexicon,
    tags: Option<TagLexicon>,
    images: BTreeMap<String, BagMatcher>,
    active: Option<String>,
}

impl SyntheticBackend {
    pub fn new(mlm: TableMlm, lexicon: Option<SentimentLexicon>, tags: Option<TagLexicon>) -> Self {
        let mlm_digest = short_digest(&mlm.format());
        SyntheticBackend {
            mlm,
            mlm_digest,
            lexicon: lexicon.unwrap_or_else(SentimentLexicon::builtin),
            tags,
            images: BTreeMap::new(),
            active: None,
        }
    }

    pub fn from_sources(mlm: &str, lexicon: Option<&str>, tags: Option<&str>) -> Result<Self, Error> {
        Ok(Self::new(
            TableMlm::parse(mlm)?,
            lexicon.map(SentimentLexicon::parse).transpose()?,
            tags.map(TagLexicon::parse).transpose()?,
        ))
    }

    /// Backend for a built-in fixture with all of its images registered and
    /// the first one active.
    pub fn builtin(fixture: &fixtures::Fixture) -> Self {
        let mut b = Self::from_sources(fixture.mlm, fixture.lexicon, fixture.tags).expect("built-in fixture is valid");
        for (k, (_, bag)) in fixture.images.iter().enumerate() {
            let h = b.register_image(bag.as_bytes()).expect("built-in image is valid");
            if k == 0 {
                b.select_image(&h).expect("just registered");
            }
        }
        b
    }

    /// Built-in image by name, as raw bytes.
    pub fn builtin_image(fixture: &fixtures::Fixture, name: &str) -> Option<&'static str> {
        fixture.images.iter().find(|(n, _)| *n == name).map(|(_, b)| *b)
    }

    /// Loads `mlm.txt`, `lexicon.tsv` and `tags.tsv` from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, Error> {
        let mlm = fs::read_to_string(dir.join("mlm.txt"))?;
        let optional = |name: &str| -> Result<Option<String>, Error> {
            let p = dir.join(name);
            if p.exists() {
                Ok(Some(fs::read_to_string(p)?))
            } else {
                Ok(None)
            }
        };
        let lexicon = optional("lexicon.tsv")?;
        let tags = optional("tags.tsv")?;
        Self::from_sources(&mlm, lexicon.as_deref(), tags.as_deref())
    }

    pub fn table(&self) -> &TableMlm {
        &self.mlm
    }

    /// Parses image bytes as a bag. Identical bytes give identical handles.
    pub fn register_image(&mut self, bytes: &[u8]) -> Result<String, ScorerError> {
        let text = std::str::from_utf8(bytes).map_err(|e| ScorerError::ImageDecode(e.to_string()))?;
        let bag = BagMatcher::parse(text, self.mlm.vocabulary()).map_err(|e| ScorerError::ImageDecode(e.to_string()))?;
        let handle = format!("bag-{}", short_digest(text));
        self.images.insert(handle.clone(), bag);
        Ok(handle)
    }

    pub fn select_image(&mut self, handle: &str) -> Result<(), ScorerError> {
        if !self.images.contains_key(handle) {
            return Err(ScorerError::StaleHandle(handle.to_string()));
        }
        self.active = Some(handle.to_string());
        Ok(())
    }

    /// Installs `bag` directly as the active image.
    pub fn set_image(&mut self, bag: BagMatcher) {
        let handle = format!("bag-direct-{}", self.images.len());
        self.images.insert(handle.clone(), bag);
        self.active = Some(handle);
    }

    pub fn active_image(&self) -> Option<&BagMatcher> {
        self.active.as_ref().and_then(|h| self.images.get(h))
    }

    pub fn match_with(&self, handle: &str, texts: &[CandidateText]) -> Result<Vec<f64>, ScorerError> {
        let bag = self
            .images
            .get(handle)
            .ok_or_else(|| ScorerError::StaleHandle(handle.to_string()))?;
        Ok(texts.iter().map(|t| bag.score(&t.token_ids)).collect())
    }

    fn token_tags(&self, tags: &TagLexicon, ids: &[TokenId]) -> Vec<String> {
        let vocab = self.mlm.vocabulary();
        ids.iter()
            .map(|&t| {
                if t == vocab.mask_id() {
                    "[MASK]".to_string()
                } else {
                    tags.tag(vocab.piece(t).unwrap_or("")).to_string()
                }
            })
            .collect()
    }
}

impl ScorerBackend for SyntheticBackend {
    fn vocabulary(&self) -> &Vocabulary {
        self.mlm.vocabulary()
    }

    fn manifest(&self) -> BackendManifest {
        let mut ops: Vec<&str> = vec!["handshake", "register_image", "mlm_topk", "mlm_dist", "match", "control", "embed"];
        ops.sort_unstable();
        let mut tasks = vec!["style:positive".to_string(), "style:negative".to_string()];
        if self.tags.is_some() {
            tasks.push("pos".into());
            tasks.push("pos-hard".into());
        }
        BackendManifest {
            protocol_version: PROTOCOL_VERSION,
            vocab_size: self.mlm.vocabulary().size(),
            mask_id: self.mlm.vocabulary().mask_id(),
            supported_ops: ops.into_iter().map(String::from).collect(),
            supported_control_tasks: tasks.into_iter().collect(),
            model_tags: vec![
                format!("synthetic/table-mlm:{}", self.mlm_digest),
                "synthetic/bag-matcher".into(),
                format!("synthetic/lexicon:{}", short_digest(&self.lexicon.to_tsv())),
            ],
            embed_dim: Some(self.mlm.vocabulary().size()),
            match_score_scale: None,
        }
    }

    fn mlm_topk(&mut self, tokens: &[TokenId], mask_pos: usize, k: usize) -> Result<Vec<(TokenId, f64)>, ScorerError> {
        if mask_pos >= tokens.len() {
            return Err(ScorerError::Protocol(format!("mask position {mask_pos} outside {} tokens", tokens.len())));
        }
        Ok(self.mlm.top_k(tokens, mask_pos, k))
    }

    fn mlm_distribution(&mut self, tokens: &[TokenId], mask_pos: usize) -> Result<Vec<f64>, ScorerError> {
        if mask_pos >= tokens.len() {
            return Err(ScorerError::Protocol(format!("mask position {mask_pos} outside {} tokens", tokens.len())));
        }
        Ok(self.mlm.predict(tokens, mask_pos).to_vec())
    }

    fn match_scores(&mut self, texts: &[CandidateText]) -> Result<Vec<f64>, ScorerError> {
        let handle = self
            .active
            .clone()
            .ok_or_else(|| ScorerError::StaleHandle("<no image registered>".into()))?;
        self.match_with(&handle, texts)
    }

    fn control_scores(&mut self, task: &ControlTask, position: usize, texts: &[CandidateText]) -> Result<Vec<f64>, ScorerError> {
        match task {
            ControlTask::Style { target } => {
                let polarity = target
                    .polarity()
                    .ok_or_else(|| ScorerError::Unsupported(format!("control task style:{target}")))?;
                let strings: Vec<&str> = texts.iter().map(|t| t.text.as_str()).collect();
                Ok(sentiment_scores(&strings, &self.lexicon, polarity))
            }
            ControlTask::Pos { template, hard } => {
                let tags = self
                    .tags
                    .as_ref()
                    .ok_or_else(|| ScorerError::Unsupported("control task pos".into()))?;
                let tagged: Vec<Vec<String>> = texts.iter().map(|t| self.token_tags(tags, &t.token_ids)).collect();
                let mut scores = pos_match_scores(&tagged, template).map_err(|e| ScorerError::Protocol(e.to_string()))?;
                if *hard {
                    let violates: Vec<bool> = tagged
                        .iter()
                        .map(|t| !t.get(position).is_some_and(|tag| template.allows(position, tag)))
                        .collect();
                    if violates.iter().any(|v| !v) {
                        for (s, v) in scores.iter_mut().zip(&violates) {
                            if *v {
                                *s = f64::NEG_INFINITY;
                            }
                        }
                    }
                }
                Ok(scores)
            }
            other => Err(ScorerError::Unsupported(format!("control task {other:?}"))),
        }
    }

    fn embed(&mut self, texts: &[String]) -> Result<Vec<Vec<f64>>, ScorerError> {
        let vocab = self.mlm.vocabulary();
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0.0; vocab.size()];
                for w in normalize_words(t) {
                    if let Some(id) = vocab.id_of(&w) {
                        v[id as usize] += 1.0;
                    }
                }
                v
            })
            .collect())
    }
}
