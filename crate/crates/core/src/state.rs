use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::vocab::{TokenId, Vocabulary};

/// The token canvas being polished: an immutable prompt followed by `n`
/// slots, some of which may be frozen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionState {
    prompt: Vec<TokenId>,
    slots: Vec<TokenId>,
    frozen: Vec<bool>,
    mask_id: TokenId,
}

impl CaptionState {
    /// `n` editable slots, all masked.
    pub fn masked(prompt: Vec<TokenId>, n: usize, mask_id: TokenId) -> Result<Self, Error> {
        Self::new(prompt, vec![mask_id; n], vec![false; n], mask_id)
    }

    pub fn new(prompt: Vec<TokenId>, slots: Vec<TokenId>, frozen: Vec<bool>, mask_id: TokenId) -> Result<Self, Error> {
        if slots.is_empty() {
            return Err(Error::InvalidArgument("caption needs at least one slot".into()));
        }
        if slots.len() != frozen.len() {
            return Err(Error::InvalidArgument(format!(
                "{} slots but {} frozen flags",
                slots.len(),
                frozen.len()
            )));
        }
        Ok(CaptionState {
            prompt,
            slots,
            frozen,
            mask_id,
        })
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), Error> {
        if self.mask_id != vocab.mask_id() {
            return Err(Error::InvalidArgument("state mask id differs from vocabulary".into()));
        }
        if let Some(&bad) = self.prompt.iter().chain(&self.slots).find(|&&t| !vocab.contains(t)) {
            return Err(Error::InvalidArgument(format!(
                "token {bad} outside vocabulary of size {}",
                vocab.size()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn slots(&self) -> &[TokenId] {
        &self.slots
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen.get(i).copied().unwrap_or(true)
    }

    pub fn editable_positions(&self) -> Vec<usize> {
        (0..self.slots.len()).filter(|&i| !self.frozen[i]).collect()
    }

    /// Prompt followed by the slots.
    pub fn full_sequence(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.prompt.len() + self.slots.len());
        out.extend_from_slice(&self.prompt);
        out.extend_from_slice(&self.slots);
        out
    }

    /// Index of slot `i` inside [`full_sequence`](Self::full_sequence).
    pub fn sequence_index(&self, i: usize) -> usize {
        self.prompt.len() + i
    }

    /// Copy with slot `i` replaced. Frozen slots refuse the write.
    pub fn with_slot(&self, i: usize, token: TokenId) -> Result<Self, Error> {
        if i >= self.slots.len() {
            return Err(Error::InvalidArgument(format!(
                "position {i} outside caption of length {}",
                self.slots.len()
            )));
        }
        if self.frozen[i] {
            return Err(Error::InvalidArgument(format!("position {i} is frozen")));
        }
        let mut next = self.clone();
        next.slots[i] = token;
        Ok(next)
    }
}
