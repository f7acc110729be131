use std::collections::{BTreeMap, HashSet};

use rand::Rng;

use super::model::TokenizerModel;
use crate::dataio::{embedding_matrix, ItemEmbedding};
use crate::error::Result;
use crate::numerics::squared_distance;
use crate::seed::rng_for;

/// Per-item code tuple, optionally followed by a disambiguation index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticTokenTuple {
    pub codes: Vec<usize>,
    pub disambig: Option<usize>,
}

/// Tokenizes every item. Items sharing a code tuple receive disambiguation
/// values `0, 1, ...` in item-id order; every other item gets `0`.
pub fn assign_tokens(model: &TokenizerModel, items: &[ItemEmbedding]) -> Result<BTreeMap<String, SemanticTokenTuple>> {
    if items.is_empty() {
        return Ok(BTreeMap::new());
    }
    let codes = model.codes_for(&embedding_matrix(items)?)?;
    Ok(disambiguate(items.iter().map(|e| e.item_id.clone()).zip(codes)))
}

/// Uniform seeded hashing of items into `[0, size)^levels`, disambiguated
/// like [`assign_tokens`].
pub fn random_tokens(items: &[ItemEmbedding], levels: usize, size: usize, seed: u64) -> BTreeMap<String, SemanticTokenTuple> {
    let mut rng = rng_for(seed, "tokenizer/random");
    disambiguate(items.iter().map(|e| {
        let codes = (0..levels).map(|_| rng.gen_range(0..size)).collect();
        (e.item_id.clone(), codes)
    }))
}

pub fn disambiguate(assigned: impl IntoIterator<Item = (String, Vec<usize>)>) -> BTreeMap<String, SemanticTokenTuple> {
    let mut groups: BTreeMap<Vec<usize>, Vec<String>> = BTreeMap::new();
    for (id, codes) in assigned {
        groups.entry(codes).or_default().push(id);
    }
    let mut out = BTreeMap::new();
    for (codes, mut ids) in groups {
        ids.sort();
        for (rank, id) in ids.into_iter().enumerate() {
            out.insert(id, SemanticTokenTuple { codes: codes.clone(), disambig: Some(rank) });
        }
    }
    out
}

/// True when no two items share a full tuple.
pub fn is_unique(tokens: &BTreeMap<String, SemanticTokenTuple>) -> bool {
    tokens.values().collect::<HashSet<_>>().len() == tokens.len()
}

/// Share of items whose code tuple (without suffix) is held by an earlier item.
pub fn collision_rate(tokens: &BTreeMap<String, SemanticTokenTuple>) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let distinct: HashSet<&Vec<usize>> = tokens.values().map(|t| &t.codes).collect();
    (tokens.len() - distinct.len()) as f64 / tokens.len() as f64
}

/// Fraction of items whose nearest other item (squared Euclidean in embedding
/// space, lowest index on ties) carries the same first-level code.
pub fn prefix_agreement_at_1(items: &[ItemEmbedding], tokens: &BTreeMap<String, SemanticTokenTuple>) -> f64 {
    if items.len() < 2 {
        return 0.0;
    }
    let first: Vec<Option<usize>> =
        items.iter().map(|e| tokens.get(&e.item_id).and_then(|t| t.codes.first().copied())).collect();
    let mut agree = 0usize;
    for (i, a) in items.iter().enumerate() {
        let mut best = (usize::MAX, f64::INFINITY);
        for (j, b) in items.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = squared_distance(&a.vector, &b.vector);
            if d < best.1 {
                best = (j, d);
            }
        }
        if first[i].is_some() && first[i] == first[best.0] {
            agree += 1;
        }
    }
    agree as f64 / items.len() as f64
}
