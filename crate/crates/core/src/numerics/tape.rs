//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every operation appends a node holding its forward value. `grad` walks the
//! nodes backwards once, accumulating adjoints, and returns the adjoints of
//! the parameter leaves keyed by [`ParamId`].

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use super::matrix::{gemm, DenseMatrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Position of a trainable matrix in its model's parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Input,
    Param,
    StopGrad,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows { input: Var, inv_std: Vec<f64> },
    NormalizeRows { input: Var, norms: Vec<f64> },
    GatherRows { table: Var, idx: Vec<usize> },
    SliceCols { input: Var, start: usize },
    ConcatCols(Vec<Var>),
    SumSquares(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: DenseMatrix },
    Attention { q: Var, k: Var, v: Var, heads: usize, blocks: Vec<AttentionBlock>, probs: Vec<DenseMatrix> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::StopGrad => "stop_grad",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SumSquares(_) => "sum_squares",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Attention { .. } => "attention",
        }
    }
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, DenseMatrix>,
    op: Op,
}

/// Query rows attending to a range of key rows, as one unit of a packed batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionBlock {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
    /// Query `i` sees keys `0..=i` only (requires equal-length ranges).
    pub causal: bool,
}

/// Gradients of a scalar loss with respect to the parameters bound on the tape.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, DenseMatrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&DenseMatrix> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &DenseMatrix)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Adds `other` entry-wise, keeping entries present in either.
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, g) in other.by_param {
            match self.by_param.get_mut(&id) {
                Some(existing) => existing.add_assign(&g),
                None => {
                    self.by_param.insert(id, g);
                }
            }
        }
    }
}

/// Parameters are borrowed for the tape's lifetime, so binding is free.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, Var>,
    /// Replacement values for stop-gradient nodes, consumed in recording order.
    frozen: Vec<DenseMatrix>,
    stop_grads: usize,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose `k`-th stop-gradient node takes `frozen[k]` as its value
    /// instead of its input's. Replaying a graph this way holds everything
    /// behind a stop-gradient constant, which is what finite differences of
    /// the surrogate objective need.
    pub fn with_frozen_stop_grads(frozen: Vec<DenseMatrix>) -> Self {
        Tape { frozen, ..Self::default() }
    }

    /// Values of all stop-gradient nodes in recording order.
    pub fn stop_grad_values(&self) -> Vec<DenseMatrix> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGrad))
            .map(|n| n.value.clone().into_owned())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Constant leaf. Receives no gradient output.
    pub fn input(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Input)
    }

    /// Trainable leaf. Binding the same id twice returns the first node.
    pub fn param(&mut self, id: ParamId, value: &'a DenseMatrix) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Param });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Binds `values[i]` as `ParamId(i)`.
    pub fn bind_params(&mut self, values: impl IntoIterator<Item = &'a DenseMatrix>) -> Vec<Var> {
        values.into_iter().enumerate().map(|(i, m)| self.param(ParamId(i), m)).collect()
    }

    /// Identity in the forward pass, zero adjoint in the backward pass.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let value = match self.frozen.get(self.stop_grads) {
            Some(f) if f.shape() == self.shape(a) => f.clone(),
            _ => self.value(a).clone(),
        };
        self.stop_grads += 1;
        self.push(value, Op::StopGrad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul: {}x{} by {}x{}", m, k, k2, n);
        let mut out = DenseMatrix::zeros(m, n);
        gemm(self.value(a), false, self.value(b), false, &mut out, 0.0);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_t: {}x{} by ({}x{})^T", m, k, n, k2);
        let mut out = DenseMatrix::zeros(m, n);
        gemm(self.value(a), false, self.value(b), true, &mut out, 0.0);
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let mut out = self.value(a).clone();
        for (o, y) in out.as_mut_slice().iter_mut().zip(self.value(b).as_slice()) {
            *o -= y;
        }
        self.push(out, Op::Sub(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row: bias shape");
        let mut out = self.value(a).clone();
        let bias = self.value(row).as_slice().to_vec();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "mul_row: gain shape");
        let mut out = self.value(a).clone();
        let gain = self.value(row).as_slice().to_vec();
        for r in 0..out.rows() {
            for (o, g) in out.row_mut(r).iter_mut().zip(&gain) {
                *o *= g;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Per-row standardization (zero mean, unit variance); no affine part.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let n = out.cols() as f64;
        let mut inv_std = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNormRows { input: a, inv_std })
    }

    /// Scales each row to unit Euclidean norm. Fails on a zero row.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Numeric(format!("row {} has norm {}, cosine similarity undefined", r, n)));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        Ok(self.push(out, Op::NormalizeRows { input: a, norms }))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let out = self.value(table).select_rows(idx);
        self.push(out, Op::GatherRows { table, idx: idx.to_vec() })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        assert!(start + len <= src.cols(), "slice_cols out of range");
        let mut out = DenseMatrix::zeros(src.rows(), len);
        for r in 0..src.rows() {
            out.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { input: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = DenseMatrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let src = self.value(p);
            assert_eq!(src.rows(), rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + src.cols()].copy_from_slice(src.row(r));
            }
            off += src.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Sum of squared entries, as a 1x1 node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        self.push(DenseMatrix::scalar(s), Op::SumSquares(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().sum();
        self.push(DenseMatrix::scalar(s), Op::Sum(a))
    }

    /// Mean over rows of `-log softmax(logits_r)[targets_r]`, as a 1x1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let mut probs = self.value(logits).clone();
        assert_eq!(probs.rows(), targets.len(), "cross_entropy: one target per row");
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            let lse = log_sum_exp(row);
            total += lse - row[t];
            softmax_in_place(row);
        }
        let n = targets.len().max(1) as f64;
        self.push(
            DenseMatrix::scalar(total / n),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Multi-head scaled dot-product attention over a packed batch. Each block
    /// maps a range of query rows onto a range of key/value rows; heads split
    /// the columns evenly. Query rows outside every block produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, blocks: &[AttentionBlock]) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert!(heads > 0 && d % heads == 0, "attention: width {} not divisible by {} heads", d, heads);
        assert_eq!(kv.cols(), d, "attention: key width");
        assert_eq!(vv.shape(), kv.shape(), "attention: value shape");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = DenseMatrix::zeros(qv.rows(), d);
        let mut probs = Vec::with_capacity(blocks.len() * heads);
        for b in blocks {
            if b.causal {
                assert_eq!(b.queries.len(), b.keys.len(), "causal block needs square ranges");
            }
            for h in 0..heads {
                let qh = block_cols(qv, &b.queries, h * dh, dh);
                let kh = block_cols(kv, &b.keys, h * dh, dh);
                let vh = block_cols(vv, &b.keys, h * dh, dh);
                let mut p = DenseMatrix::zeros(qh.rows(), kh.rows());
                gemm(&qh, false, &kh, true, &mut p, 0.0);
                for i in 0..p.rows() {
                    let row = p.row_mut(i);
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = if b.causal && j > i { f64::NEG_INFINITY } else { *x * scale };
                    }
                    softmax_in_place(row);
                }
                let mut oh = DenseMatrix::zeros(qh.rows(), dh);
                gemm(&p, false, &vh, false, &mut oh, 0.0);
                for (i, r) in b.queries.clone().enumerate() {
                    out.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(oh.row(i));
                }
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, blocks: blocks.to_vec(), probs })
    }

    /// Reverse pass from a 1x1 `loss`, returning the adjoint of every node.
    fn backward(&self, loss: Var, keep: Option<Var>) -> Result<(Vec<Option<DenseMatrix>>, Option<DenseMatrix>)> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::Usage(format!("loss must be 1x1, got {}x{}", r, c)));
        }
        if !self.scalar(loss).is_finite() {
            let first = self.nodes[..=loss.0]
                .iter()
                .position(|n| !n.value.is_finite())
                .unwrap_or(loss.0);
            return Err(Error::Numeric(format!(
                "loss is {}; first non-finite node #{} ({})",
                self.scalar(loss),
                first,
                self.nodes[first].op.name()
            )));
        }

        let mut adj: Vec<Option<DenseMatrix>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(DenseMatrix::scalar(1.0));
        let mut kept = None;

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if keep.map(|k| k.0) == Some(i) {
                kept = Some(g.clone());
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param | Op::StopGrad => {
                    // leaves keep their adjoint for collection
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut ga = DenseMatrix::zeros(va.rows(), va.cols());
                    gemm(&g, false, vb, true, &mut ga, 0.0);
                    let mut gb = DenseMatrix::zeros(vb.rows(), vb.cols());
                    gemm(va, true, &g, false, &mut gb, 0.0);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut ga = DenseMatrix::zeros(va.rows(), va.cols());
                    gemm(&g, false, vb, false, &mut ga, 0.0);
                    let mut gb = DenseMatrix::zeros(vb.rows(), vb.cols());
                    gemm(&g, true, va, false, &mut gb, 0.0);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.map(|v| -v));
                    accumulate(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut adj, *row, column_sums(&g));
                    accumulate(&mut adj, *a, g);
                }
                Op::MulRow(a, row) => {
                    let va = self.value(*a);
                    let gain = self.value(*row).as_slice();
                    let mut ga = g.clone();
                    let mut grow = DenseMatrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            ga.row_mut(r)[c] = g.get(r, c) * gain[c];
                            grow.as_mut_slice()[c] += g.get(r, c) * va.get(r, c);
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *row, grow);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.scale_assign(*s);
                    accumulate(&mut adj, *a, ga);
                }
                Op::Relu(a) => {
                    let va = self.value(*a);
                    let mut ga = g;
                    for (gv, x) in ga.as_mut_slice().iter_mut().zip(va.as_slice()) {
                        if *x <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = ga.row_mut(r);
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - s);
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::LayerNormRows { input, inv_std } => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut ga = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = ga.row_mut(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = inv_std[r] * (*gv - mean_g - yv * mean_gy);
                        }
                    }
                    accumulate(&mut adj, *input, ga);
                }
                Op::NormalizeRows { input, norms } => {
                    let y = &node.value;
                    let mut ga = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = ga.row_mut(r);
                        let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = (*gv - yv * gy) / norms[r];
                        }
                    }
                    accumulate(&mut adj, *input, ga);
                }
                Op::GatherRows { table, idx } => {
                    let (tr, tc) = self.shape(*table);
                    let mut gt = DenseMatrix::zeros(tr, tc);
                    for (o, &t) in idx.iter().enumerate() {
                        for (d, s) in gt.row_mut(t).iter_mut().zip(g.row(o)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut adj, *table, gt);
                }
                Op::SliceCols { input, start } => {
                    let (ir, ic) = self.shape(*input);
                    let mut gi = DenseMatrix::zeros(ir, ic);
                    for r in 0..ir {
                        gi.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adj, *input, gi);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (pr, pc) = self.shape(p);
                        let mut gp = DenseMatrix::zeros(pr, pc);
                        for r in 0..pr {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        off += pc;
                        accumulate(&mut adj, p, gp);
                    }
                }
                Op::SumSquares(a) => {
                    let s = g.as_slice()[0];
                    let ga = self.value(*a).map(|v| 2.0 * s * v);
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let s = g.as_slice()[0];
                    let (r, c) = self.shape(*a);
                    accumulate(&mut adj, *a, DenseMatrix::from_vec(r, c, vec![s; r * c]).expect("shape"));
                }
                Op::Attention { q, k, v, heads, blocks, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.cols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = DenseMatrix::zeros(qv.rows(), d);
                    let mut gk = DenseMatrix::zeros(kv.rows(), d);
                    let mut gv = DenseMatrix::zeros(vv.rows(), d);
                    for (bi, b) in blocks.iter().enumerate() {
                        for h in 0..*heads {
                            let p = &probs[bi * heads + h];
                            let qh = block_cols(qv, &b.queries, h * dh, dh);
                            let kh = block_cols(kv, &b.keys, h * dh, dh);
                            let vh = block_cols(vv, &b.keys, h * dh, dh);
                            let go = block_cols(&g, &b.queries, h * dh, dh);
                            // dV = P^T dO, dP = dO V^T
                            let mut dv = DenseMatrix::zeros(vh.rows(), dh);
                            gemm(p, true, &go, false, &mut dv, 0.0);
                            let mut dp = DenseMatrix::zeros(p.rows(), p.cols());
                            gemm(&go, false, &vh, true, &mut dp, 0.0);
                            for i in 0..dp.rows() {
                                let pr = p.row(i);
                                let dr = dp.row_mut(i);
                                let s: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                                for (x, pv) in dr.iter_mut().zip(pr) {
                                    *x = pv * (*x - s) * scale;
                                }
                            }
                            let mut dq = DenseMatrix::zeros(qh.rows(), dh);
                            gemm(&dp, false, &kh, false, &mut dq, 0.0);
                            let mut dk = DenseMatrix::zeros(kh.rows(), dh);
                            gemm(&dp, true, &qh, false, &mut dk, 0.0);
                            scatter_cols(&mut gq, &b.queries, h * dh, &dq);
                            scatter_cols(&mut gk, &b.keys, h * dh, &dk);
                            scatter_cols(&mut gv, &b.keys, h * dh, &dv);
                        }
                    }
                    accumulate(&mut adj, *q, gq);
                    accumulate(&mut adj, *k, gk);
                    accumulate(&mut adj, *v, gv);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let s = g.as_slice()[0] / targets.len().max(1) as f64;
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gl.row_mut(r)[t] -= 1.0;
                    }
                    gl.scale_assign(s);
                    accumulate(&mut adj, *logits, gl);
                }
            }
        }
        Ok((adj, kept))
    }

    /// Gradients of the 1x1 node `loss` with respect to every bound parameter
    /// that it depends on.
    pub fn grad(&self, loss: Var) -> Result<Gradients> {
        let (adj, _) = self.backward(loss, None)?;
        let mut by_param = BTreeMap::new();
        for (&id, &v) in &self.params {
            if let Some(Some(g)) = adj.get(v.0) {
                by_param.insert(id, g.clone());
            }
        }
        Ok(Gradients { by_param })
    }

    /// Adjoint of an arbitrary node (zero matrix when it does not influence `loss`).
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Result<DenseMatrix> {
        let (_, kept) = self.backward(loss, Some(wrt))?;
        let (r, c) = self.shape(wrt);
        Ok(kept.unwrap_or_else(|| DenseMatrix::zeros(r, c)))
    }
}

fn block_cols(m: &DenseMatrix, rows: &Range<usize>, start: usize, len: usize) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(rows.len(), len);
    for (o, r) in rows.clone().enumerate() {
        out.row_mut(o).copy_from_slice(&m.row(r)[start..start + len]);
    }
    out
}

fn scatter_cols(dst: &mut DenseMatrix, rows: &Range<usize>, start: usize, src: &DenseMatrix) {
    for (o, r) in rows.clone().enumerate() {
        for (d, s) in dst.row_mut(r)[start..start + src.cols()].iter_mut().zip(src.row(o)) {
            *d += s;
        }
    }
}

fn accumulate(adj: &mut [Option<DenseMatrix>], v: Var, g: DenseMatrix) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let w_value = DenseMatrix::scalar(3.0);
        let w = tape.param(ParamId(0), &w_value);
        let f = tape.sum_squares(w);
        let g = tape.grad(f).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().as_slice(), &[6.0]);
    }

    #[test]
    fn constant_has_no_gradient() {
        let mut tape = Tape::new();
        let w_value = DenseMatrix::scalar(3.0);
        let w = tape.param(ParamId(0), &w_value);
        let c = tape.input(DenseMatrix::scalar(2.5));
        let zero = tape.scale(w, 0.0);
        let f = tape.add(c, zero);
        let g = tape.grad(f).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().as_slice(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut tape = Tape::new();
        let w_value = DenseMatrix::zeros(2, 1);
        let w = tape.param(ParamId(0), &w_value);
        assert!(matches!(tape.grad(w), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_loss_names_first_bad_node() {
        let mut tape = Tape::new();
        let w_value = DenseMatrix::scalar(1e300);
        let w = tape.param(ParamId(0), &w_value);
        let big = tape.scale(w, 1e300);
        let f = tape.sum_squares(big);
        let err = tape.grad(f).unwrap_err().to_string();
        assert!(err.contains("#1 (scale)"), "{err}");
    }

    #[test]
    fn stop_grad_blocks_only_marked_path() {
        // f = sum((w * 2)^2) + sum(sg(w)^2): the second path contributes nothing
        let build = |mark: bool| {
            let mut tape = Tape::new();
            let w_value = DenseMatrix::row_vector(&[0.5, -1.5]);
            let w = tape.param(ParamId(0), &w_value);
            let two = tape.scale(w, 2.0);
            let a = tape.sum_squares(two);
            let side = if mark { tape.stop_grad(w) } else { w };
            let b = tape.sum_squares(side);
            let f = tape.add(a, b);
            (tape.scalar(f), tape.grad(f).unwrap().get(ParamId(0)).unwrap().clone())
        };
        let (v_marked, g_marked) = build(true);
        let (v_plain, g_plain) = build(false);
        assert_eq!(v_marked, v_plain);
        assert_eq!(g_marked.as_slice(), &[4.0, -12.0]);
        assert_eq!(g_plain.as_slice(), &[5.0, -15.0]);
    }

    #[test]
    fn grad_of_interior_node() {
        let mut tape = Tape::new();
        let x = tape.input(DenseMatrix::row_vector(&[1.0, 2.0]));
        let y = tape.scale(x, 3.0);
        let f = tape.sum_squares(y);
        let gy = tape.grad_of(f, y).unwrap();
        assert_eq!(gy.as_slice(), &[6.0, 12.0]);
        let gx = tape.grad_of(f, x).unwrap();
        assert_eq!(gx.as_slice(), &[18.0, 36.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_n() {
        let mut tape = Tape::new();
        let l = tape.input(DenseMatrix::zeros(3, 5));
        let ce = tape.cross_entropy(l, &[0, 2, 4]);
        approx::assert_abs_diff_eq!(tape.scalar(ce), 5f64.ln(), epsilon = 1e-12);
    }
}
