#![allow(dead_code)]

use cost::numerics::{DenseMatrix, ParamId, Tape, Var};
use cost::tokenizer::TokenizerModel;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Gradient norms below `NORM_FLOOR * max(1, |f|)` are indistinguishable from
/// finite-difference round-off, which grows like `eps * |f| / h` per entry.
pub const NORM_FLOOR: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR · max(1, |f|))` for a loss of value `f`.
pub fn rel_err(a: &DenseMatrix, n: &DenseMatrix, f: f64) -> f64 {
    let diff: f64 = a.as_slice().iter().zip(n.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / a.sum_squares().sqrt().max(n.sum_squares().sqrt()).max(NORM_FLOOR * f.abs().max(1.0))
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Central differences of `f` with respect to every entry of every tensor in `params`.
pub fn numeric_grads(params: &mut [DenseMatrix], f: &dyn Fn(&[DenseMatrix]) -> f64) -> Vec<DenseMatrix> {
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = DenseMatrix::zeros(params[p].rows(), params[p].cols());
        for e in 0..params[p].len() {
            let orig = params[p].as_slice()[e];
            params[p].as_mut_slice()[e] = orig + FD_STEP;
            let plus = f(params);
            params[p].as_mut_slice()[e] = orig - FD_STEP;
            let minus = f(params);
            params[p].as_mut_slice()[e] = orig;
            g.as_mut_slice()[e] = (plus - minus) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

/// Per-tensor relative error between tape gradients and central differences
/// for a scalar graph built by `build` over `params` bound as `ParamId(i)`.
pub fn check_graph(params: Vec<DenseMatrix>, build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> Vec<f64> {
    let (analytic, f0) = {
        let mut tape = Tape::new();
        let vars = tape.bind_params(params.iter());
        let loss = build(&mut tape, &vars);
        (tape.grad(loss).unwrap(), tape.scalar(loss))
    };
    let mut params = params;
    let eval = |ps: &[DenseMatrix]| {
        let mut tape = Tape::new();
        let vars = tape.bind_params(ps.iter());
        let loss = build(&mut tape, &vars);
        tape.scalar(loss)
    };
    let numeric = numeric_grads(&mut params, &eval);
    numeric
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let zero = DenseMatrix::zeros(n.rows(), n.cols());
            rel_err(analytic.get(ParamId(i)).unwrap_or(&zero), n, f0)
        })
        .collect()
}

/// Per-tensor relative error of the tokenizer objective's gradient, with code
/// selection frozen and every stop-gradient value held at the base point.
pub fn check_tokenizer(model: &TokenizerModel, x: &DenseMatrix) -> Vec<f64> {
    let codes = model.codes_for(x).unwrap();
    let (analytic, frozen, f0) = {
        let mut tape = Tape::new();
        let g = model.batch_graph(&mut tape, x, Some(&codes)).unwrap();
        (tape.grad(g.loss).unwrap(), tape.stop_grad_values(), tape.scalar(g.loss))
    };
    let mut params: Vec<DenseMatrix> = model.parameters().into_iter().cloned().collect();
    let eval = |ps: &[DenseMatrix]| {
        let mut m = model.clone();
        for (dst, src) in m.parameters_mut().into_iter().zip(ps) {
            *dst = src.clone();
        }
        let mut tape = Tape::with_frozen_stop_grads(frozen.clone());
        let g = m.batch_graph(&mut tape, x, Some(&codes)).unwrap();
        tape.scalar(g.loss)
    };
    let numeric = numeric_grads(&mut params, &eval);
    numeric
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let zero = DenseMatrix::zeros(n.rows(), n.cols());
            rel_err(analytic.get(ParamId(i)).unwrap_or(&zero), n, f0)
        })
        .collect()
}

/// A random tokenizer with `d ≤ 8, K ≤ 4, M ≤ 3` and a batch of `B ≤ 4` rows.
pub fn micro_tokenizer<R: Rng>(rng: &mut R, mode: cost::tokenizer::LossMode) -> (TokenizerModel, DenseMatrix) {
    let d_in = rng.gen_range(2..=8);
    let hidden = rng.gen_range(2..=8);
    let cfg = cost::tokenizer::TokenizerConfig {
        loss_mode: mode,
        encoder_hidden: vec![hidden],
        latent_dim: rng.gen_range(2..=8),
        levels: rng.gen_range(1..=3),
        codebook_size: rng.gen_range(2..=4),
        shared_codebook: rng.gen_bool(0.5),
        tau: rng.gen_range(0.2..1.5),
        alpha: rng.gen_range(0.1..1.0),
        seed: rng.gen(),
        ..Default::default()
    };
    let mut model = TokenizerModel::init(d_in, &cfg).unwrap();
    for t in model.books.tables_mut() {
        *t = random_matrix(t.rows(), t.cols(), rng);
    }
    for p in model.parameters_mut() {
        if p.rows() == 1 {
            *p = random_matrix(1, p.cols(), rng);
        }
    }
    let b = rng.gen_range(2..=4);
    (model, random_matrix(b, d_in, rng))
}

/// Every tuple of `[0, k)^levels` as its own item `t<index>`, without suffixes.
pub fn full_grid_tokens(levels: usize, k: usize) -> std::collections::BTreeMap<String, cost::tokenizer::SemanticTokenTuple> {
    let n = k.pow(levels as u32);
    (0..n)
        .map(|i| {
            let mut codes = vec![0; levels];
            let mut rest = i;
            for l in (0..levels).rev() {
                codes[l] = rest % k;
                rest /= k;
            }
            (format!("t{:04}", i), cost::tokenizer::SemanticTokenTuple { codes, disambig: None })
        })
        .collect()
}

pub fn tiny_generator(levels: usize, k: usize, seed: u64) -> cost::generator::GeneratorModel {
    let cfg = cost::generator::GeneratorConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        model_dim: 8,
        heads: 2,
        ff_dim: 16,
        max_input_items: 3,
        seed,
        ..Default::default()
    };
    cost::generator::GeneratorModel::init(&cfg, full_grid_tokens(levels, k), levels, k).unwrap()
}

/// Replaces every parameter with uniform noise of the given scale, so
/// distributions are far from uniform.
pub fn randomize<R: Rng>(model: &mut cost::generator::GeneratorModel, scale: f64, rng: &mut R) {
    for p in model.parameters_mut() {
        for v in p.as_mut_slice() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

/// Every masked tuple with its score, sorted by score then tuple.
pub fn exhaustive(model: &cost::generator::GeneratorModel, input: &[usize]) -> Vec<cost::generator::Beam> {
    let mut tuples: Vec<Vec<usize>> = vec![vec![]];
    for pos in 0..model.vocab.positions() {
        let range = model.vocab.position_range(pos);
        tuples = tuples
            .into_iter()
            .flat_map(|t| {
                range.clone().map(move |id| {
                    let mut n = t.clone();
                    n.push(id);
                    n
                })
            })
            .collect();
    }
    let scores = cost::generator::score_tuples(model, input, &tuples).unwrap();
    let mut beams: Vec<_> = tuples.into_iter().zip(scores).map(|(ids, logprob)| cost::generator::Beam { ids, logprob }).collect();
    beams.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.ids.cmp(&b.ids)));
    beams
}
