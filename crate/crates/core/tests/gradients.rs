mod common;

use common::{check_graph, check_tokenizer, micro_tokenizer, random_matrix};
use cost::numerics::{AttentionBlock, Tape, Var};
use cost::tokenizer::LossMode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn assert_close(errs: &[f64], what: &str) {
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < TOL, "{}: tensor {} relative error {:.3e}", what, i, e);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduces an arbitrary matrix to a scalar with a fixed random projection so
/// every output entry carries a distinct weight.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let (r, c) = tape.value(v).shape();
    let w = tape.input(random_matrix(r, c, &mut rng(seed)));
    let diff = tape.sub(v, w);
    tape.sum_squares(diff)
}

#[test]
fn matmul_family() {
    let mut r = rng(1);
    let ps = vec![random_matrix(3, 4, &mut r), random_matrix(4, 2, &mut r), random_matrix(5, 4, &mut r)];
    assert_close(
        &check_graph(ps, &|t, v| {
            let a = t.matmul(v[0], v[1]);
            let b = t.matmul_t(v[2], v[0]);
            let pa = project(t, a, 10);
            let pb = project(t, b, 11);
            t.add(pa, pb)
        }),
        "matmul",
    );
}

#[test]
fn row_broadcasts_and_relu() {
    let mut r = rng(2);
    let ps = vec![random_matrix(4, 3, &mut r), random_matrix(1, 3, &mut r), random_matrix(1, 3, &mut r)];
    assert_close(
        &check_graph(ps, &|t, v| {
            let a = t.add_row(v[0], v[1]);
            let b = t.mul_row(a, v[2]);
            let c = t.relu(b);
            let d = t.scale(c, 0.7);
            project(t, d, 3)
        }),
        "add_row/mul_row/relu",
    );
}

#[test]
fn softmax_and_normalizations() {
    let mut r = rng(3);
    let ps = vec![random_matrix(3, 5, &mut r)];
    assert_close(
        &check_graph(ps.clone(), &|t, v| {
            let s = t.softmax_rows(v[0]);
            project(t, s, 4)
        }),
        "softmax",
    );
    assert_close(
        &check_graph(ps.clone(), &|t, v| {
            let s = t.layer_norm_rows(v[0]);
            project(t, s, 5)
        }),
        "layer_norm",
    );
    assert_close(
        &check_graph(ps, &|t, v| {
            let s = t.normalize_rows(v[0]).unwrap();
            project(t, s, 6)
        }),
        "normalize_rows",
    );
}

#[test]
fn gather_slice_concat_sum() {
    let mut r = rng(4);
    let ps = vec![random_matrix(4, 3, &mut r), random_matrix(2, 2, &mut r)];
    assert_close(
        &check_graph(ps, &|t, v| {
            let g = t.gather_rows(v[0], &[3, 0, 3]);
            let s = t.slice_cols(g, 1, 2);
            let c = t.concat_cols(&[s, g]);
            let p = project(t, c, 7);
            let q = t.sum(v[1]);
            let q2 = t.matmul(q, q);
            t.add(p, q2)
        }),
        "gather/slice/concat/sum",
    );
}

#[test]
fn cross_entropy() {
    let mut r = rng(5);
    let ps = vec![random_matrix(4, 6, &mut r)];
    assert_close(&check_graph(ps, &|t, v| t.cross_entropy(v[0], &[0, 5, 2, 2])), "cross_entropy");
}

#[test]
fn attention_packed_blocks() {
    let mut r = rng(6);
    // Two query segments: causal self-attention over rows 0..3, and rows 3..5
    // attending to keys 1..5.
    let ps = vec![random_matrix(5, 4, &mut r), random_matrix(5, 4, &mut r), random_matrix(5, 4, &mut r)];
    let blocks = vec![
        AttentionBlock { queries: 0..3, keys: 0..3, causal: true },
        AttentionBlock { queries: 3..5, keys: 1..5, causal: false },
    ];
    for heads in [1, 2] {
        assert_close(
            &check_graph(ps.clone(), &|t, v| {
                let a = t.attention(v[0], v[1], v[2], heads, &blocks);
                project(t, a, 8)
            }),
            "attention",
        );
    }
}

#[test]
fn cross_attention_with_different_lengths() {
    let mut r = rng(7);
    let ps = vec![random_matrix(2, 6, &mut r), random_matrix(4, 6, &mut r), random_matrix(4, 6, &mut r)];
    let blocks = vec![AttentionBlock { queries: 0..2, keys: 0..4, causal: false }];
    assert_close(
        &check_graph(ps, &|t, v| {
            let a = t.attention(v[0], v[1], v[2], 3, &blocks);
            project(t, a, 9)
        }),
        "cross attention",
    );
}

#[test]
fn tokenizer_objective_every_mode() {
    let mut r = rng(11);
    for mode in [LossMode::Reconstructive, LossMode::Contrastive, LossMode::Combined] {
        for _ in 0..5 {
            let (model, x) = micro_tokenizer(&mut r, mode);
            assert_close(&check_tokenizer(&model, &x), mode.label());
        }
    }
}

#[test]
fn generator_forward_pass() {
    use cost::generator::{pack_pairs, GeneratorConfig, GeneratorModel, TrainingPair};
    use cost::tokenizer::SemanticTokenTuple;
    use std::collections::BTreeMap;

    let mut tokens = BTreeMap::new();
    for (i, codes) in [[0, 1], [1, 0], [2, 2]].iter().enumerate() {
        tokens.insert(format!("i{}", i), SemanticTokenTuple { codes: codes.to_vec(), disambig: None });
    }
    let cfg = GeneratorConfig { encoder_layers: 1, decoder_layers: 1, model_dim: 4, heads: 2, ff_dim: 6, max_input_items: 2, seed: 3, ..Default::default() };
    let model = GeneratorModel::init(&cfg, tokens, 2, 3).unwrap();
    let table = &model.table;
    let pair = |h: &str, n: &str| {
        let (input, target) = cost::generator::flatten_sequence(&[h.to_string()], Some(n), table, &model.vocab, 2).unwrap();
        TrainingPair { input, target }
    };
    let pairs = [pair("i0", "i1"), pair("i2", "i0")];
    let refs: Vec<&TrainingPair> = pairs.iter().collect();
    let (packed, targets) = pack_pairs(&refs, model.vocab.bos());

    let base: Vec<_> = model.parameters().into_iter().cloned().collect();
    let errs = check_graph(base, &|t, v| {
        let memory = model.encode(t, v, &packed).unwrap();
        let logits = model.decode(t, v, memory, &packed).unwrap();
        t.cross_entropy(logits, &targets)
    });
    assert_close(&errs, "generator");
}
