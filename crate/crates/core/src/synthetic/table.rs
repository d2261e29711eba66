//! Context-table masked language model.
//!
//! Predictions are keyed on the tokens left and right of the mask and on the
//! mask's index in the full token sequence, any of which may be a wildcard.
//! Lookup tries, in order:
//!
//! 1. `(left, right, pos)`
//! 2. `(left, right, *)`
//! 3. `(left, *, pos)`
//! 4. `(*, right, pos)`
//! 5. `(left, *, *)`
//! 6. `(*, right, *)`
//! 7. `(*, *, pos)`
//!
//! and falls back to the unigram vector.
//!
//! Text format, one directive per line, `#` comments:
//!
//! ```text
//! vocab a cat dog sits runs . [MASK]
//! mask [MASK]
//! unigram a=0.4 cat=0.2 dog=0.2 sits=0.1 runs=0.1
//! context cat * * sits=0.7 runs=0.3
//! context ^ $ 0 cat=1
//! ```
//!
//! `^` is the start boundary (left only), `$` the end boundary (right only),
//! `*` matches anything. Tokens left out of a vector have probability 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::Error;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Neighbor {
    Any,
    Boundary,
    Token(TokenId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextKey {
    pub left: Neighbor,
    pub right: Neighbor,
    pub position: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableMlm {
    vocab: Vocabulary,
    unigram: Vec<f64>,
    contexts: BTreeMap<ContextKey, Vec<f64>>,
}

pub const MAX_TOY_VOCAB: usize = 64;
const RESERVED: [&str; 3] = ["*", "^", "$"];

fn check_distribution(what: &str, v: &[f64]) -> Result<(), Error> {
    if let Some(p) = v.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(Error::Fixture(format!("{what}: invalid probability {p}")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Fixture(format!("{what}: probabilities sum to {sum}")));
    }
    Ok(())
}

impl TableMlm {
    pub fn new(vocab: Vocabulary, unigram: Vec<f64>, contexts: BTreeMap<ContextKey, Vec<f64>>) -> Result<Self, Error> {
        if vocab.size() > MAX_TOY_VOCAB {
            return Err(Error::Fixture(format!(
                "table vocabulary has {} tokens; the cap is {MAX_TOY_VOCAB}",
                vocab.size()
            )));
        }
        if unigram.len() != vocab.size() {
            return Err(Error::Fixture("unigram length differs from vocabulary".into()));
        }
        check_distribution("unigram", &unigram)?;
        for (key, v) in &contexts {
            if v.len() != vocab.size() {
                return Err(Error::Fixture(format!("context {key:?}: wrong length")));
            }
            check_distribution(&format!("context {key:?}"), v)?;
            for n in [key.left, key.right] {
                if let Neighbor::Token(t) = n {
                    if !vocab.contains(t) {
                        return Err(Error::Fixture(format!("context {key:?}: unknown token {t}")));
                    }
                }
            }
        }
        Ok(TableMlm {
            vocab,
            unigram,
            contexts,
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn unigram(&self) -> &[f64] {
        &self.unigram
    }

    pub fn contexts(&self) -> &BTreeMap<ContextKey, Vec<f64>> {
        &self.contexts
    }

    /// Predicted distribution for the masked position.
    pub fn predict(&self, tokens: &[TokenId], mask_pos: usize) -> &[f64] {
        let left = if mask_pos == 0 {
            Neighbor::Boundary
        } else {
            tokens.get(mask_pos - 1).map_or(Neighbor::Boundary, |&t| Neighbor::Token(t))
        };
        let right = tokens
            .get(mask_pos + 1)
            .map_or(Neighbor::Boundary, |&t| Neighbor::Token(t));
        let p = Some(mask_pos);
        let any = Neighbor::Any;
        let chain = [
            (left, right, p),
            (left, right, None),
            (left, any, p),
            (any, right, p),
            (left, any, None),
            (any, right, None),
            (any, any, p),
        ];
        chain
            .iter()
            .find_map(|&(left, right, position)| self.contexts.get(&ContextKey { left, right, position }))
            .map_or(&self.unigram[..], Vec::as_slice)
    }

    /// Top-`k` (clamped to the vocabulary) by descending probability, ties
    /// broken by ascending token id.
    pub fn top_k(&self, tokens: &[TokenId], mask_pos: usize, k: usize) -> Vec<(TokenId, f64)> {
        let dist = self.predict(tokens, mask_pos);
        let mut ids: Vec<TokenId> = (0..dist.len() as TokenId).collect();
        ids.sort_by(|&a, &b| dist[b as usize].total_cmp(&dist[a as usize]).then(a.cmp(&b)));
        ids.truncate(k.min(dist.len()));
        ids.into_iter().map(|t| (t, dist[t as usize])).collect()
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut surface: Vec<String> = Vec::new();
        let mut mask: Option<String> = None;
        let mut pad: Option<String> = None;
        let mut unigram_line: Option<(usize, Vec<String>)> = None;
        let mut context_lines: Vec<(usize, Vec<String>)> = Vec::new();

        for (no, raw) in text.lines().enumerate() {
            let lineno = no + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let directive = fields.next().expect("nonempty line");
            let rest: Vec<String> = fields.map(str::to_string).collect();
            match directive {
                "vocab" => {
                    for t in rest {
                        if RESERVED.contains(&t.as_str()) || t.contains('=') {
                            return Err(Error::Fixture(format!("line {lineno}: reserved token {t:?}")));
                        }
                        surface.push(t);
                    }
                }
                "mask" | "pad" => {
                    let [t] = <[String; 1]>::try_from(rest)
                        .map_err(|_| Error::Fixture(format!("line {lineno}: {directive} takes one token")))?;
                    if directive == "mask" {
                        mask = Some(t);
                    } else {
                        pad = Some(t);
                    }
                }
                "unigram" => unigram_line = Some((lineno, rest)),
                "context" => context_lines.push((lineno, rest)),
                other => return Err(Error::Fixture(format!("line {lineno}: unknown directive {other:?}"))),
            }
        }

        let lookup = |surface: &[String], t: &str, lineno: usize| -> Result<TokenId, Error> {
            surface
                .iter()
                .position(|s| s == t)
                .map(|i| i as TokenId)
                .ok_or_else(|| Error::Fixture(format!("line {lineno}: unknown token {t:?}")))
        };
        let mask = mask.ok_or_else(|| Error::Fixture("missing mask directive".into()))?;
        let mask_id = lookup(&surface, &mask, 0)?;
        let pad_id = pad.map(|p| lookup(&surface, &p, 0)).transpose()?;
        let vocab = Vocabulary::new(surface.clone(), mask_id, pad_id)?;

        let parse_vector = |items: &[String], lineno: usize| -> Result<Vec<f64>, Error> {
            let mut v = vec![0.0; surface.len()];
            for item in items {
                let (t, p) = item
                    .split_once('=')
                    .ok_or_else(|| Error::Fixture(format!("line {lineno}: expected token=prob, got {item:?}")))?;
                let id = lookup(&surface, t, lineno)?;
                v[id as usize] = p
                    .parse()
                    .map_err(|_| Error::Fixture(format!("line {lineno}: bad probability {p:?}")))?;
            }
            Ok(v)
        };

        let (lineno, items) = unigram_line.ok_or_else(|| Error::Fixture("missing unigram directive".into()))?;
        let unigram = parse_vector(&items, lineno)?;

        let mut contexts = BTreeMap::new();
        for (lineno, items) in context_lines {
            if items.len() < 3 {
                return Err(Error::Fixture(format!("line {lineno}: context needs left right pos")));
            }
            let neighbor = |s: &str, boundary: &str| -> Result<Neighbor, Error> {
                match s {
                    "*" => Ok(Neighbor::Any),
                    b if b == boundary => Ok(Neighbor::Boundary),
                    t => lookup(&surface, t, lineno).map(Neighbor::Token),
                }
            };
            let left = neighbor(&items[0], "^")?;
            let right = neighbor(&items[1], "$")?;
            let position = match items[2].as_str() {
                "*" => None,
                p => Some(
                    p.parse()
                        .map_err(|_| Error::Fixture(format!("line {lineno}: bad position {p:?}")))?,
                ),
            };
            let key = ContextKey { left, right, position };
            if contexts.insert(key, parse_vector(&items[3..], lineno)?).is_some() {
                return Err(Error::Fixture(format!("line {lineno}: duplicate context")));
            }
        }
        TableMlm::new(vocab, unigram, contexts)
    }

    /// Canonical text form; `parse(format())` reproduces the table exactly.
    pub fn format(&self) -> String {
        let s = self.vocab.surface();
        let mut out = String::new();
        let _ = writeln!(out, "vocab {}", s.join(" "));
        let _ = writeln!(out, "mask {}", s[self.vocab.mask_id() as usize]);
        if let Some(p) = self.vocab.pad_id() {
            let _ = writeln!(out, "pad {}", s[p as usize]);
        }
        let vector = |v: &[f64]| -> String {
            v.iter()
                .enumerate()
                .filter(|(_, p)| **p != 0.0)
                .map(|(i, p)| format!(" {}={p:?}", s[i]))
                .collect()
        };
        let _ = writeln!(out, "unigram{}", vector(&self.unigram));
        let neighbor = |n: Neighbor, boundary: &str| -> String {
            match n {
                Neighbor::Any => "*".into(),
                Neighbor::Boundary => boundary.into(),
                Neighbor::Token(t) => s[t as usize].clone(),
            }
        };
        for (key, v) in &self.contexts {
            let pos = key.position.map_or("*".to_string(), |p| p.to_string());
            let _ = writeln!(
                out,
                "context {} {} {pos}{}",
                neighbor(key.left, "^"),
                neighbor(key.right, "$"),
                vector(v)
            );
        }
        out
    }
}
