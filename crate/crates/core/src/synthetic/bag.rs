//! Bag-of-tokens image stand-in.
//!
//! A bag ignores word order entirely. It exists to make the engine's
//! arithmetic checkable by hand and is not a model of image-text alignment.
//!
//! Text format: one `token weight` pair per line, `#` comments. A token may
//! appear several times; each line is one element of the multiset.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::Error;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BagMatcher {
    elements: Vec<(TokenId, f64)>,
}

impl BagMatcher {
    pub fn new(elements: Vec<(TokenId, f64)>) -> Result<Self, Error> {
        if let Some((t, w)) = elements.iter().find(|(_, w)| !w.is_finite()) {
            return Err(Error::Fixture(format!("bag weight {w} of token {t} is not finite")));
        }
        Ok(BagMatcher { elements })
    }

    pub fn elements(&self) -> &[(TokenId, f64)] {
        &self.elements
    }

    /// Sum of the weights of bag elements matched by tokens of the text.
    /// Every occurrence in the text consumes one bag element of that token,
    /// in bag order, until the token's elements run out.
    pub fn score(&self, tokens: &[TokenId]) -> f64 {
        let mut seen: HashMap<TokenId, usize> = HashMap::new();
        for &t in tokens {
            *seen.entry(t).or_insert(0) += 1;
        }
        let mut total = 0.0;
        for &(t, w) in &self.elements {
            if let Some(c) = seen.get_mut(&t) {
                if *c > 0 {
                    *c -= 1;
                    total += w;
                }
            }
        }
        total
    }

    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self, Error> {
        let mut elements = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [token, weight] = fields[..] else {
                return Err(Error::Fixture(format!("bag line {}: expected `token weight`", no + 1)));
            };
            let id = vocab
                .id_of(token)
                .ok_or_else(|| Error::Fixture(format!("bag line {}: unknown token {token:?}", no + 1)))?;
            let w: f64 = weight
                .parse()
                .map_err(|_| Error::Fixture(format!("bag line {}: bad weight {weight:?}", no + 1)))?;
            elements.push((id, w));
        }
        BagMatcher::new(elements)
    }

    pub fn format(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for &(t, w) in &self.elements {
            let _ = writeln!(out, "{} {w:?}", vocab.piece(t).unwrap_or("?"));
        }
        out
    }
}
