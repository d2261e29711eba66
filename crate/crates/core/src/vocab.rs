use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub type TokenId = u32;

/// Token inventory reported by a backend.
///
/// `surface[id]` is the text piece for `id`. Pieces starting with `##`
/// continue the previous word when detokenizing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    surface: Vec<String>,
    mask_id: TokenId,
    pad_id: Option<TokenId>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    surface: Vec<String>,
    mask_id: TokenId,
    pad_id: Option<TokenId>,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabularyRepr) -> Result<Self, Error> {
        Vocabulary::new(r.surface, r.mask_id, r.pad_id)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            surface: v.surface,
            mask_id: v.mask_id,
            pad_id: v.pad_id,
        }
    }
}

impl Vocabulary {
    pub fn new(surface: Vec<String>, mask_id: TokenId, pad_id: Option<TokenId>) -> Result<Self, Error> {
        if surface.is_empty() {
            return Err(Error::InvalidArgument("vocabulary is empty".into()));
        }
        if surface.len() > TokenId::MAX as usize {
            return Err(Error::InvalidArgument("vocabulary too large".into()));
        }
        let size = surface.len();
        if mask_id as usize >= size {
            return Err(Error::InvalidArgument(format!(
                "mask id {mask_id} outside vocabulary of size {size}"
            )));
        }
        if let Some(pad) = pad_id {
            if pad as usize >= size {
                return Err(Error::InvalidArgument(format!(
                    "pad id {pad} outside vocabulary of size {size}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(size);
        for (id, piece) in surface.iter().enumerate() {
            // first occurrence wins for duplicated pieces
            index.entry(piece.clone()).or_insert(id as TokenId);
        }
        Ok(Vocabulary {
            surface,
            mask_id,
            pad_id,
            index,
        })
    }

    pub fn size(&self) -> usize {
        self.surface.len()
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn pad_id(&self) -> Option<TokenId> {
        self.pad_id
    }

    pub fn surface(&self) -> &[String] {
        &self.surface
    }

    pub fn piece(&self, id: TokenId) -> Option<&str> {
        self.surface.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.surface.len()
    }

    pub fn id_of(&self, piece: &str) -> Option<TokenId> {
        self.index.get(piece).copied()
    }

    /// Tokens a generator may emit: everything except mask and padding.
    pub fn is_content(&self, id: TokenId) -> bool {
        self.contains(id) && id != self.mask_id && Some(id) != self.pad_id
    }

    /// Maps whitespace-separated words onto whole-word pieces, trying the
    /// exact spelling first and then its lowercase form.
    pub fn encode_words(&self, text: &str) -> Result<Vec<TokenId>, Error> {
        text.split_whitespace()
            .map(|w| {
                self.id_of(w)
                    .or_else(|| self.id_of(&w.to_lowercase()))
                    .ok_or_else(|| Error::UnknownWord(w.to_string()))
            })
            .collect()
    }

    /// Joins pieces with single spaces, gluing `##` continuation pieces onto
    /// the previous word. Unknown ids render as `<unk:ID>`.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            match self.piece(id) {
                Some(p) if p.len() > 2 && p.starts_with("##") && !out.is_empty() => out.push_str(&p[2..]),
                Some(p) => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(p);
                }
                None => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(&format!("<unk:{id}>"));
                }
            }
        }
        out
    }
}
