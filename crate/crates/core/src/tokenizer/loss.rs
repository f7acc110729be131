//! Reconstruction, quantization and in-batch contrastive objectives.
//!
//! Batch losses are means over the rows of the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, norm, squared_distance, DenseMatrix, Tape, Var};
use crate::quantizer::TapeQuantization;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    /// `L_mse + L_rq`
    #[serde(rename = "re")]
    Reconstructive,
    /// `alpha * L_cl + L_rq`
    #[serde(rename = "co")]
    Contrastive,
    /// `L_mse + alpha * L_cl + L_rq`
    #[serde(rename = "re+co")]
    Combined,
}

impl LossMode {
    pub fn uses_mse(self) -> bool {
        matches!(self, LossMode::Reconstructive | LossMode::Combined)
    }

    pub fn uses_contrastive(self) -> bool {
        matches!(self, LossMode::Contrastive | LossMode::Combined)
    }

    pub fn label(self) -> &'static str {
        match self {
            LossMode::Reconstructive => "re",
            LossMode::Contrastive => "co",
            LossMode::Combined => "re+co",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "re" | "reconstructive" => Ok(LossMode::Reconstructive),
            "co" | "contrastive" => Ok(LossMode::Contrastive),
            "re+co" | "combined" => Ok(LossMode::Combined),
            other => Err(Error::Usage(format!("unknown loss mode {:?} (expected re, co or re+co)", other))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Loss terms of one batch. Terms that were not evaluated are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub mse: Option<f64>,
    pub rq: f64,
    pub cl: Option<f64>,
}

/// `||x - x_hat||^2`
pub fn loss_mse(x: &[f64], x_hat: &[f64]) -> f64 {
    squared_distance(x, x_hat)
}

/// Quantization loss of one item from its residuals `r_0..r_{M-1}` and the
/// selected code vectors `e_1..e_M`.
pub fn loss_rq(residuals: &[Vec<f64>], selected: &[Vec<f64>], beta: f64) -> f64 {
    residuals
        .iter()
        .zip(selected)
        .map(|(r, e)| {
            let d = squared_distance(r, e);
            d + beta * d
        })
        .sum()
}

/// In-batch softmax over cosine similarities: anchors are the inputs, the
/// positive for anchor `j` is `x_hat_j`, every other reconstruction is a negative.
pub fn loss_cl(x: &DenseMatrix, x_hat: &DenseMatrix, tau: f64) -> Result<f64> {
    check_contrastive_inputs(x, x_hat, tau)?;
    let b = x.rows();
    let mut total = 0.0;
    for j in 0..b {
        let xj = x.row(j);
        let logits: Vec<f64> = (0..b).map(|i| cosine(xj, x_hat.row(i)) / tau).collect();
        total += log_sum_exp(&logits) - logits[j];
    }
    Ok(total / b as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

fn check_contrastive_inputs(x: &DenseMatrix, x_hat: &DenseMatrix, tau: f64) -> Result<()> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Usage(format!("contrastive inputs {:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    if x.rows() == 0 {
        return Err(Error::Usage("contrastive loss needs a non-empty batch".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {}", tau)));
    }
    for (name, m) in [("input", x), ("reconstruction", x_hat)] {
        if let Some(i) = m.iter_rows().position(|r| norm(r) == 0.0) {
            return Err(Error::Numeric(format!("{} at batch index {} has zero norm; cosine similarity undefined", name, i)));
        }
    }
    Ok(())
}

/// Weighted objective for `mode`. Inactive terms are ignored.
pub fn total_loss(mode: LossMode, components: &LossComponents, alpha: f64) -> f64 {
    let mut total = components.rq;
    if mode.uses_mse() {
        total += components.mse.unwrap_or(0.0);
    }
    if mode.uses_contrastive() {
        total += alpha * components.cl.unwrap_or(0.0);
    }
    total
}

// Tape versions, used for training.

pub fn mse_on_tape(tape: &mut Tape, x: Var, x_hat: Var) -> Var {
    let b = tape.value(x).rows().max(1) as f64;
    let diff = tape.sub(x, x_hat);
    let s = tape.sum_squares(diff);
    tape.scale(s, 1.0 / b)
}

/// `sum_i ||sg(r_{i-1}) - e_i||^2 + beta * ||r_{i-1} - sg(e_i)||^2`, batch mean.
pub fn rq_on_tape(tape: &mut Tape, q: &TapeQuantization, beta: f64) -> Var {
    let b = tape.value(q.residuals[0]).rows().max(1) as f64;
    let mut total: Option<Var> = None;
    for (level, &e) in q.selected.iter().enumerate() {
        let r = q.residuals[level];
        let r_sg = tape.stop_grad(r);
        let e_sg = tape.stop_grad(e);
        let codebook_side = tape.sub(r_sg, e);
        let codebook_term = tape.sum_squares(codebook_side);
        let commit_side = tape.sub(r, e_sg);
        let commit = tape.sum_squares(commit_side);
        let commit = tape.scale(commit, beta);
        let level_loss = tape.add(codebook_term, commit);
        total = Some(match total {
            Some(t) => tape.add(t, level_loss),
            None => level_loss,
        });
    }
    let total = total.expect("at least one level");
    tape.scale(total, 1.0 / b)
}

pub fn cl_on_tape(tape: &mut Tape, x: Var, x_hat: Var, tau: f64) -> Result<Var> {
    check_contrastive_inputs(tape.value(x), tape.value(x_hat), tau)?;
    let b = tape.value(x).rows();
    let xn = tape.normalize_rows(x)?;
    let hn = tape.normalize_rows(x_hat)?;
    let sim = tape.matmul_t(xn, hn);
    let logits = tape.scale(sim, 1.0 / tau);
    let targets: Vec<usize> = (0..b).collect();
    Ok(tape.cross_entropy(logits, &targets))
}
