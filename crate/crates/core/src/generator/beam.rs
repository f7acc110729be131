use std::cmp::Ordering;
use std::collections::HashSet;
use std::ops::Range;

use super::model::{GeneratorModel, PackedInputs};
use super::vocab::flatten_sequence;
use crate::error::Result;
use crate::evaluator::{EvalSplit, RankedCase};
use crate::numerics::{log_sum_exp, DenseMatrix, Tape, Var};

/// A decoded token-id tuple and its summed log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub ids: Vec<usize>,
    pub logprob: f64,
}

/// Higher score first, then lexicographically smaller tuple.
fn beam_order(a: &Beam, b: &Beam) -> Ordering {
    b.logprob.total_cmp(&a.logprob).then_with(|| a.ids.cmp(&b.ids))
}

/// Encoder memory for a single query, kept on one tape across decode steps.
struct Query<'a> {
    tape: Tape<'a>,
    params: Vec<Var>,
    memory: Var,
    encoder: PackedInputs,
}

impl<'a> Query<'a> {
    fn new(model: &'a GeneratorModel, input: &[usize]) -> Result<Self> {
        let mut tape = Tape::new();
        let params = tape.bind_params(model.parameters());
        let mut encoder = PackedInputs::default();
        encoder.push_encoder(input);
        let memory = model.encode(&mut tape, &params, &encoder)?;
        Ok(Query { tape, params, memory, encoder })
    }

    /// Logits of the next token after each prefix (one row per prefix).
    fn next_logits(&mut self, model: &'a GeneratorModel, prefixes: &[&[usize]]) -> Result<DenseMatrix> {
        let mut packed = PackedInputs { enc_segments: self.encoder.enc_segments.clone(), ..Default::default() };
        for p in prefixes {
            let mut dec = Vec::with_capacity(p.len() + 1);
            dec.push(model.vocab.bos());
            dec.extend_from_slice(p);
            packed.push_decoder(&dec, 0);
        }
        let logits = model.decode(&mut self.tape, &self.params, self.memory, &packed)?;
        let all = self.tape.value(logits);
        let last: Vec<usize> = packed.dec_segments.iter().map(|s| s.end - 1).collect();
        Ok(all.select_rows(&last))
    }
}

fn allowed(model: &GeneratorModel, pos: usize) -> Range<usize> {
    if model.config.level_masking {
        model.vocab.position_range(pos)
    } else {
        0..model.vocab.size()
    }
}

/// Full-vocabulary log-softmax of the next token after each prefix.
pub fn next_token_log_probs(model: &GeneratorModel, input: &[usize], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let mut q = Query::new(model, input)?;
    let refs: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
    let logits = q.next_logits(model, &refs)?;
    Ok(logits
        .iter_rows()
        .map(|row| {
            let lse = log_sum_exp(row);
            row.iter().map(|x| x - lse).collect()
        })
        .collect())
}

/// Summed log-probability of each complete tuple under the decode-time masking rule.
pub fn score_tuples(model: &GeneratorModel, input: &[usize], tuples: &[Vec<usize>]) -> Result<Vec<f64>> {
    let mut q = Query::new(model, input)?;
    let mut scores = vec![0.0; tuples.len()];
    for pos in 0..model.vocab.positions() {
        let range = allowed(model, pos);
        let prefixes: Vec<&[usize]> = tuples.iter().map(|t| &t[..pos]).collect();
        let logits = q.next_logits(model, &prefixes)?;
        for (i, row) in logits.iter_rows().enumerate() {
            let slice = &row[range.clone()];
            let id = tuples[i][pos];
            scores[i] += if range.contains(&id) { row[id] - log_sum_exp(slice) } else { f64::NEG_INFINITY };
        }
    }
    Ok(scores)
}

/// Length-fixed beam search over the token positions of one item.
///
/// Each step scores every extension of every live beam, then keeps the best
/// `width` by total log-probability with ties going to the smaller tuple.
pub fn beam_search(model: &GeneratorModel, input: &[usize], width: usize) -> Result<Vec<Beam>> {
    let width = width.max(1);
    let mut q = Query::new(model, input)?;
    let mut beams = vec![Beam { ids: Vec::new(), logprob: 0.0 }];
    for pos in 0..model.vocab.positions() {
        let range = allowed(model, pos);
        let prefixes: Vec<&[usize]> = beams.iter().map(|b| b.ids.as_slice()).collect();
        let logits = q.next_logits(model, &prefixes)?;
        let mut candidates = Vec::with_capacity(beams.len() * range.len());
        for (beam, row) in beams.iter().zip(logits.iter_rows()) {
            let slice = &row[range.clone()];
            let lse = log_sum_exp(slice);
            for (offset, &x) in slice.iter().enumerate() {
                let mut ids = Vec::with_capacity(pos + 1);
                ids.extend_from_slice(&beam.ids);
                ids.push(range.start + offset);
                candidates.push(Beam { ids, logprob: beam.logprob + (x - lse) });
            }
        }
        candidates.sort_by(beam_order);
        candidates.truncate(width);
        beams = candidates;
    }
    Ok(beams)
}

/// Ranked items for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub items: Vec<(String, f64)>,
    /// Beams whose tuple names no catalog item.
    pub invalid: usize,
}

/// Beam-search results mapped through the token-item table, deduplicated and cut to `k`.
pub fn retrieve(model: &GeneratorModel, history: &[String], k: usize, width: usize) -> Result<Retrieval> {
    if width < k {
        log::warn!("beam width {} is smaller than k {}; fewer than k items may be returned", width, k);
    }
    let (input, _) = flatten_sequence(history, None, &model.table, &model.vocab, model.config.max_input_items)?;
    let beams = beam_search(model, &input, width)?;
    Ok(filter_beams(model, &beams, k))
}

pub fn filter_beams(model: &GeneratorModel, beams: &[Beam], k: usize) -> Retrieval {
    let mut seen = HashSet::new();
    let mut items = Vec::new();
    let mut invalid = 0;
    for b in beams {
        match model.table.item_for(&b.ids) {
            Some(item) => {
                if items.len() < k && seen.insert(item) {
                    items.push((item.to_string(), b.logprob));
                }
            }
            None => invalid += 1,
        }
    }
    Retrieval { items, invalid }
}

/// `user_id<TAB>item:logprob item:logprob ...`
pub fn format_retrieval(user_id: &str, items: &[(String, f64)]) -> String {
    let ranked: Vec<String> = items.iter().map(|(i, lp)| format!("{}:{:.6}", i, lp)).collect();
    format!("{}\t{}", user_id, ranked.join(" "))
}

/// Retrieves for every user's test history and pairs the ranking with the test target.
pub fn retrieve_test_cases(model: &GeneratorModel, split: &EvalSplit, k: usize, width: usize) -> Result<(Vec<RankedCase>, Vec<String>)> {
    let mut cases = Vec::with_capacity(split.users.len());
    let mut lines = Vec::with_capacity(split.users.len());
    let mut short = 0;
    for user in &split.users {
        let r = retrieve(model, user.test_history(), k, width)?;
        if r.items.len() < k {
            short += 1;
        }
        lines.push(format_retrieval(&user.user_id, &r.items));
        cases.push(RankedCase {
            user_id: user.user_id.clone(),
            ranked: r.items.into_iter().map(|(i, _)| i).collect(),
            target: user.test_target.clone(),
        });
    }
    if short > 0 {
        log::info!("retrieval returned fewer than {} items for {} users", k, short);
    }
    Ok((cases, lines))
}
