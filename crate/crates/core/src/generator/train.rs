use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use super::model::{GeneratorConfig, GeneratorModel, PackedInputs};
use super::vocab::flatten_sequence;
use crate::error::{Error, Result};
use crate::evaluator::EvalSplit;
use crate::numerics::{AdamConfig, AdamState, Gradients, Tape};
use crate::seed::rng_for;
use crate::tokenizer::SemanticTokenTuple;

/// Pairs per tape; larger batches are split and their gradients summed.
const MICRO_BATCH: usize = 64;

/// Encoder input and target token ids of one next-item example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorStep {
    pub epoch: usize,
    pub step: usize,
    /// Mean cross-entropy per target token.
    pub loss: f64,
    pub token_accuracy: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone)]
pub struct GeneratorFit {
    pub model: GeneratorModel,
    pub trace: Vec<GeneratorStep>,
}

impl GeneratorFit {
    /// Token-weighted `(loss, accuracy)` per epoch.
    pub fn epoch_means(&self) -> Vec<(f64, f64)> {
        let mut sums: Vec<(f64, f64, usize)> = Vec::new();
        for s in &self.trace {
            if sums.len() <= s.epoch {
                sums.resize(s.epoch + 1, (0.0, 0.0, 0));
            }
            let n = s.tokens as f64;
            sums[s.epoch].0 += s.loss * n;
            sums[s.epoch].1 += s.token_accuracy * n;
            sums[s.epoch].2 += s.tokens;
        }
        sums.into_iter().map(|(l, a, n)| (l / n.max(1) as f64, a / n.max(1) as f64)).collect()
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,step,loss,token_accuracy,tokens\n");
        for s in &self.trace {
            out.push_str(&format!("{},{},{},{},{}\n", s.epoch, s.step, s.loss, s.token_accuracy, s.tokens));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Next-item examples from every user's training region.
pub fn training_pairs(split: &EvalSplit, model: &GeneratorModel) -> Result<Vec<TrainingPair>> {
    let mut pairs = Vec::new();
    for user in &split.users {
        for (history, next) in user.train_pairs() {
            let (input, target) = flatten_sequence(history, Some(next), &model.table, &model.vocab, model.config.max_input_items)?;
            pairs.push(TrainingPair { input, target });
        }
    }
    Ok(pairs)
}

/// Packs pairs for teacher forcing: decoder input `[BOS, t1..tP]`, targets `[t1..tP, EOS]`.
pub fn pack_pairs(pairs: &[&TrainingPair], bos: usize) -> (PackedInputs, Vec<usize>) {
    let mut packed = PackedInputs::default();
    let mut targets = Vec::new();
    for p in pairs {
        let seg = packed.push_encoder(&p.input);
        let mut dec = Vec::with_capacity(p.target.len());
        dec.push(bos);
        dec.extend_from_slice(&p.target[..p.target.len() - 1]);
        packed.push_decoder(&dec, seg);
        targets.extend_from_slice(&p.target);
    }
    (packed, targets)
}

/// Loss, gradients and correct-argmax count over one micro-batch.
/// The loss is the mean over its target tokens, scaled by `weight`.
fn micro_batch(model: &GeneratorModel, pairs: &[&TrainingPair], weight: f64) -> Result<(f64, Gradients, usize)> {
    let (packed, targets) = pack_pairs(pairs, model.vocab.bos());
    let mut tape = Tape::new();
    let params = tape.bind_params(model.parameters());
    let memory = model.encode(&mut tape, &params, &packed)?;
    let logits = model.decode(&mut tape, &params, memory, &packed)?;
    let correct = argmax_hits(tape.value(logits), &targets);
    let ce = tape.cross_entropy(logits, &targets);
    let loss = tape.scale(ce, weight);
    let value = tape.scalar(ce);
    let grads = tape.grad(loss)?;
    Ok((value, grads, correct))
}

fn argmax_hits(logits: &crate::numerics::DenseMatrix, targets: &[usize]) -> usize {
    logits
        .iter_rows()
        .zip(targets)
        .filter(|(row, &t)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == t
        })
        .count()
}

/// Mean per-token cross-entropy and accuracy of `model` on `pairs`, without updating it.
pub fn evaluate_pairs(model: &GeneratorModel, pairs: &[TrainingPair]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    let mut tokens = 0;
    for chunk in pairs.chunks(MICRO_BATCH) {
        let refs: Vec<&TrainingPair> = chunk.iter().collect();
        let (packed, targets) = pack_pairs(&refs, model.vocab.bos());
        let mut tape = Tape::new();
        let params = tape.bind_params(model.parameters());
        let memory = model.encode(&mut tape, &params, &packed)?;
        let logits = model.decode(&mut tape, &params, memory, &packed)?;
        correct += argmax_hits(tape.value(logits), &targets);
        let ce = tape.cross_entropy(logits, &targets);
        loss += tape.scalar(ce) * targets.len() as f64;
        tokens += targets.len();
    }
    let n = tokens.max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Teacher-forced training on next-item pairs from each user's training region.
pub fn train_generator(
    split: &EvalSplit,
    tokens: BTreeMap<String, SemanticTokenTuple>,
    levels: usize,
    codebook_size: usize,
    config: &GeneratorConfig,
) -> Result<GeneratorFit> {
    let mut model = GeneratorModel::init(config, tokens, levels, codebook_size)?;
    let pairs = training_pairs(split, &model)?;
    if pairs.is_empty() {
        return Err(Error::Data("no training pairs: every sequence is too short for a training region".into()));
    }
    log::info!("generator: {} training pairs, vocabulary {}", pairs.len(), model.vocab.size());
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), model.parameters());
    let mut rng = rng_for(config.seed, "generator/shuffle");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut trace = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let batch: Vec<&TrainingPair> = batch.iter().map(|&i| &pairs[i]).collect();
            let total_tokens: usize = batch.iter().map(|p| p.target.len()).sum();
            let mut grads = Gradients::default();
            let mut loss = 0.0;
            let mut correct = 0;
            for mb in batch.chunks(MICRO_BATCH) {
                let mb_tokens: usize = mb.iter().map(|p| p.target.len()).sum();
                let weight = mb_tokens as f64 / total_tokens as f64;
                let (value, g, hits) = micro_batch(&model, mb, weight).map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("generator epoch {} step {}: {}", epoch, step, m)),
                    other => other,
                })?;
                loss += value * weight;
                correct += hits;
                grads.accumulate(g);
            }
            adam.step(model.parameters_mut(), &grads)?;
            trace.push(GeneratorStep {
                epoch,
                step,
                loss,
                token_accuracy: correct as f64 / total_tokens as f64,
                tokens: total_tokens,
            });
            step += 1;
        }
        if let Some(last) = trace.last() {
            log::info!("generator epoch {}: loss {:.4} acc {:.4}", epoch, last.loss, last.token_accuracy);
        }
    }
    Ok(GeneratorFit { model, trace })
}
