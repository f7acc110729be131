mod common;

use std::collections::BTreeMap;

use common::{exhaustive, randomize, tiny_generator};
use cost::dataio::{synth_clusters, synth_successor_sequences, SyntheticSpec};
use cost::evaluator::split;
use cost::generator::*;
use cost::numerics::log_sum_exp;
use cost::tokenizer::{random_tokens, SemanticTokenTuple};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn successor_fixture() -> (cost::evaluator::EvalSplit, BTreeMap<String, SemanticTokenTuple>) {
    // One cycle of 50 items: item i is always followed by item i+1.
    let spec = SyntheticSpec { n_items: 50, n_clusters: 1, d_in: 8, n_users: 300, seq_len_min: 5, seq_len_max: 10, seed: 5, ..Default::default() };
    let (items, labels) = synth_clusters(&spec).unwrap();
    let seqs = synth_successor_sequences(&spec, &labels).unwrap();
    (split(&seqs), random_tokens(&items, 3, 8, 5))
}

fn small_config(epochs: usize) -> GeneratorConfig {
    GeneratorConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        model_dim: 32,
        heads: 4,
        ff_dim: 64,
        max_input_items: 2,
        lr: 3e-3,
        batch_size: 64,
        epochs,
        seed: 9,
        ..Default::default()
    }
}

#[test]
fn successor_training_accuracy() {
    let (split, tokens) = successor_fixture();
    let fit = train_generator(&split, tokens, 3, 8, &small_config(12)).unwrap();
    let pairs = training_pairs(&split, &fit.model).unwrap();
    let (loss, acc) = evaluate_pairs(&fit.model, &pairs).unwrap();
    assert!(acc >= 0.95, "training token accuracy {} (loss {})", acc, loss);
    let means = fit.epoch_means();
    assert!(means.last().unwrap().0 < means[0].0);
}

#[test]
fn same_seed_same_trace() {
    let (split, tokens) = successor_fixture();
    let a = train_generator(&split, tokens.clone(), 3, 8, &small_config(1)).unwrap();
    let b = train_generator(&split, tokens, 3, 8, &small_config(1)).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.model.parameters(), b.model.parameters());
}

#[test]
fn untrained_loss_is_near_log_vocab() {
    let (split, tokens) = successor_fixture();
    let model = GeneratorModel::init(&small_config(0), tokens, 3, 8).unwrap();
    let pairs = training_pairs(&split, &model).unwrap();
    let (loss, _) = evaluate_pairs(&model, &pairs).unwrap();
    let expected = (model.vocab.size() as f64).ln();
    assert!((loss - expected).abs() / expected < 0.1, "loss {} vs log V {}", loss, expected);
}

#[test]
fn width_one_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..10 {
        let mut model = tiny_generator(3, 4, seed);
        randomize(&mut model, 1.0, &mut rng);
        let input = vec![model.vocab.bos(), 1, 6, 9];
        let mut prefix = Vec::new();
        let mut total = 0.0;
        for pos in 0..model.vocab.positions() {
            let lp = &next_token_log_probs(&model, &input, &[prefix.clone()]).unwrap()[0];
            let range = model.vocab.position_range(pos);
            let slice = &lp[range.clone()];
            let lse = log_sum_exp(slice);
            let mut best = 0;
            for (j, v) in slice.iter().enumerate() {
                if *v > slice[best] {
                    best = j;
                }
            }
            total += slice[best] - lse;
            prefix.push(range.start + best);
        }
        let beams = beam_search(&model, &input, 1).unwrap();
        assert_eq!(beams.len(), 1);
        assert_eq!(beams[0].ids, prefix);
        assert!((beams[0].logprob - total).abs() < 1e-9);
    }
}

#[test]
fn full_width_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = tiny_generator(2, 3, 1);
    randomize(&mut model, 1.5, &mut rng);
    let input = vec![model.vocab.bos(), 2, 4];
    let beams = beam_search(&model, &input, 9).unwrap();
    let oracle = exhaustive(&model, &input);
    assert_eq!(beams.iter().map(|b| &b.ids).collect::<Vec<_>>(), oracle.iter().map(|b| &b.ids).collect::<Vec<_>>());
    for (b, o) in beams.iter().zip(&oracle) {
        assert!((b.logprob - o.logprob).abs() < 1e-9);
    }
}

#[test]
fn uniform_logits_break_ties_lexicographically() {
    let mut model = tiny_generator(2, 3, 4);
    let n = model.parameters().len();
    for p in model.parameters_mut().into_iter().skip(n - 2) {
        for v in p.as_mut_slice() {
            *v = 0.0;
        }
    }
    let input = vec![model.vocab.bos()];
    let beams = beam_search(&model, &input, 4).unwrap();
    let got: Vec<Vec<usize>> = beams.iter().map(|b| b.ids.clone()).collect();
    assert_eq!(got, vec![vec![0, 3], vec![0, 4], vec![0, 5], vec![1, 3]]);
    assert!(beams.iter().all(|b| (b.logprob - 2.0 * (1.0f64 / 3.0).ln()).abs() < 1e-12));
}

#[test]
fn softmax_sums_to_one_at_every_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = tiny_generator(3, 4, 2);
    randomize(&mut model, 2.0, &mut rng);
    let input = vec![model.vocab.bos(), 0, 4, 8];
    let prefixes: Vec<Vec<usize>> = vec![vec![], vec![1], vec![1, 5], vec![3, 7, 11]];
    for lp in next_token_log_probs(&model, &input, &prefixes).unwrap() {
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}

#[test]
fn beams_respect_level_masks_and_are_ranked() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..5 {
        let mut model = tiny_generator(3, 3, seed);
        randomize(&mut model, 1.0, &mut rng);
        let input: Vec<usize> = std::iter::once(model.vocab.bos()).chain((0..3).map(|l| l * 3 + rng.gen_range(0..3))).collect();
        let beams = beam_search(&model, &input, 7).unwrap();
        assert_eq!(beams.len(), 7);
        for b in &beams {
            for (pos, id) in b.ids.iter().enumerate() {
                assert!(model.vocab.position_range(pos).contains(id));
            }
        }
        assert!(beams.windows(2).all(|w| w[0].logprob >= w[1].logprob));
    }
}

#[test]
fn unmasked_decoding_can_leave_the_level_range() {
    let mut model = tiny_generator(2, 2, 3);
    model.config.level_masking = false;
    let input = vec![model.vocab.bos()];
    let beams = beam_search(&model, &input, model.vocab.size() * model.vocab.size()).unwrap();
    assert_eq!(beams.len(), model.vocab.size().pow(2));
    let r = filter_beams(&model, &beams, 100);
    assert_eq!(r.items.len(), 4);
    assert_eq!(r.invalid, beams.len() - 4);
}

#[test]
fn retrieval_skips_invalid_tuples_in_order() {
    let mut tokens = BTreeMap::new();
    tokens.insert("a".to_string(), SemanticTokenTuple { codes: vec![0, 1], disambig: None });
    tokens.insert("b".to_string(), SemanticTokenTuple { codes: vec![1, 0], disambig: None });
    let model = GeneratorModel::init(&GeneratorConfig { model_dim: 8, heads: 2, ff_dim: 8, ..Default::default() }, tokens, 2, 2).unwrap();
    let beam = |ids: Vec<usize>, logprob: f64| Beam { ids, logprob };
    // b = [1, 2], a = [0, 3]; [0, 2] names no item and the last beam repeats b.
    let beams = vec![beam(vec![1, 2], -0.1), beam(vec![0, 2], -0.2), beam(vec![0, 3], -0.3), beam(vec![1, 2], -0.4)];
    let r = filter_beams(&model, &beams, 5);
    assert_eq!(r.items, vec![("b".to_string(), -0.1), ("a".to_string(), -0.3)]);
    assert_eq!(r.invalid, 1);
    assert_eq!(filter_beams(&model, &beams, 1).items, vec![("b".to_string(), -0.1)]);
    assert_eq!(format_retrieval("u1", &r.items), "u1\tb:-0.100000 a:-0.300000");
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = tiny_generator(2, 3, 7);
    randomize(&mut model, 1.0, &mut rng);
    // Checkpoints hold f32, so compare after one round trip has rounded the weights.
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let model = GeneratorModel::load(dir.path()).unwrap();
    model.save(dir.path()).unwrap();
    let loaded = GeneratorModel::load(dir.path()).unwrap();
    assert_eq!(loaded.parameters(), model.parameters());
    assert_eq!(loaded.vocab, model.vocab);
    let input = vec![model.vocab.bos(), 1, 4];
    assert_eq!(beam_search(&loaded, &input, 5).unwrap(), beam_search(&model, &input, 5).unwrap());
}

#[test]
fn heads_must_divide_model_dim() {
    let cfg = GeneratorConfig { model_dim: 10, heads: 4, ..Default::default() };
    assert!(cfg.validate().is_err());
}
