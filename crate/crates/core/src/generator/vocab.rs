use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::SemanticTokenTuple;

/// Flat token id space: `levels` blocks of `codebook_size` code ids, then the
/// disambiguation block, then PAD, BOS and EOS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocabulary {
    pub levels: usize,
    pub codebook_size: usize,
    /// Number of distinct disambiguation values; zero when items carry no suffix.
    pub disambig_size: usize,
}

impl TokenVocabulary {
    /// Derives the layout from a token map. Either every tuple has a suffix or none does.
    pub fn from_tokens(tokens: &BTreeMap<String, SemanticTokenTuple>, levels: usize, codebook_size: usize) -> Result<Self> {
        let with_suffix = tokens.values().filter(|t| t.disambig.is_some()).count();
        if with_suffix != 0 && with_suffix != tokens.len() {
            return Err(Error::Data(format!("{} of {} token tuples carry a disambiguation suffix; expected all or none", with_suffix, tokens.len())));
        }
        for (id, t) in tokens {
            if t.codes.len() != levels {
                return Err(Error::Data(format!("item {} has {} codes, expected {}", id, t.codes.len(), levels)));
            }
            if let Some(c) = t.codes.iter().find(|&&c| c >= codebook_size) {
                return Err(Error::Data(format!("item {} has code {} outside [0, {})", id, c, codebook_size)));
            }
        }
        let disambig_size = if with_suffix > 0 {
            tokens.values().filter_map(|t| t.disambig).max().map_or(0, |m| m + 1)
        } else {
            0
        };
        Ok(TokenVocabulary { levels, codebook_size, disambig_size })
    }

    pub fn has_disambig(&self) -> bool {
        self.disambig_size > 0
    }

    /// Decode positions per item.
    pub fn positions(&self) -> usize {
        self.levels + usize::from(self.has_disambig())
    }

    pub fn code_id(&self, level: usize, code: usize) -> usize {
        level * self.codebook_size + code
    }

    pub fn disambig_id(&self, d: usize) -> usize {
        self.levels * self.codebook_size + d
    }

    pub fn pad(&self) -> usize {
        self.levels * self.codebook_size + self.disambig_size
    }

    pub fn bos(&self) -> usize {
        self.pad() + 1
    }

    pub fn eos(&self) -> usize {
        self.pad() + 2
    }

    pub fn size(&self) -> usize {
        self.pad() + 3
    }

    /// Ids allowed at decode position `pos`.
    pub fn position_range(&self, pos: usize) -> Range<usize> {
        if pos < self.levels {
            let start = pos * self.codebook_size;
            start..start + self.codebook_size
        } else {
            let start = self.levels * self.codebook_size;
            start..start + self.disambig_size
        }
    }

    pub fn tuple_ids(&self, t: &SemanticTokenTuple) -> Vec<usize> {
        let mut ids: Vec<usize> = t.codes.iter().enumerate().map(|(l, &c)| self.code_id(l, c)).collect();
        if self.has_disambig() {
            ids.push(self.disambig_id(t.disambig.unwrap_or(0)));
        }
        ids
    }
}

/// Bidirectional map between item ids and their flattened token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenItemTable {
    by_tokens: HashMap<Vec<usize>, String>,
    by_item: BTreeMap<String, Vec<usize>>,
}

impl TokenItemTable {
    pub fn build(tokens: &BTreeMap<String, SemanticTokenTuple>, vocab: &TokenVocabulary) -> Result<Self> {
        let mut by_tokens = HashMap::with_capacity(tokens.len());
        let mut by_item = BTreeMap::new();
        for (item, t) in tokens {
            let ids = vocab.tuple_ids(t);
            if let Some(prev) = by_tokens.insert(ids.clone(), item.clone()) {
                return Err(Error::Data(format!("items {} and {} share the token tuple {:?}", prev, item, ids)));
            }
            by_item.insert(item.clone(), ids);
        }
        Ok(TokenItemTable { by_tokens, by_item })
    }

    pub fn item_for(&self, ids: &[usize]) -> Option<&str> {
        self.by_tokens.get(ids).map(String::as_str)
    }

    pub fn tokens_for(&self, item: &str) -> Option<&[usize]> {
        self.by_item.get(item).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_item.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_item.is_empty()
    }
}

/// Encoder input (`BOS` then the token ids of the most recent `max_items`
/// history items) and, when `next` is given, the target ids followed by `EOS`.
pub fn flatten_sequence(
    history: &[String],
    next: Option<&str>,
    table: &TokenItemTable,
    vocab: &TokenVocabulary,
    max_items: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let lookup = |item: &str| {
        table.tokens_for(item).ok_or_else(|| Error::Data(format!("item {} has no token tuple", item)))
    };
    let window = &history[history.len().saturating_sub(max_items)..];
    let mut input = Vec::with_capacity(1 + window.len() * vocab.positions());
    input.push(vocab.bos());
    for item in window {
        input.extend_from_slice(lookup(item)?);
    }
    let mut target = Vec::new();
    if let Some(n) = next {
        target.extend_from_slice(lookup(n)?);
        target.push(vocab.eos());
    }
    Ok((input, target))
}
