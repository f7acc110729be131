use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use super::tape::{Gradients, ParamId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

/// Moment accumulators for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<DenseMatrix>,
    second: Vec<DenseMatrix>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a DenseMatrix>) -> Self {
        let first: Vec<_> = params.into_iter().map(|p| DenseMatrix::zeros(p.rows(), p.cols())).collect();
        let second = first.clone();
        AdamState { config, first, second, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &DenseMatrix {
        &self.first[id.0]
    }

    pub fn second_moment(&self, id: ParamId) -> &DenseMatrix {
        &self.second[id.0]
    }

    /// One bias-corrected Adam update. Parameters without a gradient entry
    /// are updated as if their gradient were zero.
    pub fn step(&mut self, params: Vec<&mut DenseMatrix>, grads: &Gradients) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (id, g) in grads.iter() {
            let p = params.get(id.0).ok_or_else(|| Error::Usage(format!("gradient for unknown parameter {}", id.0)))?;
            if p.shape() != g.shape() {
                return Err(Error::Usage(format!(
                    "gradient shape {:?} does not match parameter {} shape {:?}",
                    g.shape(),
                    id.0,
                    p.shape()
                )));
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        for (i, p) in params.into_iter().enumerate() {
            let g = grads.get(ParamId(i));
            let m = self.first[i].as_mut_slice();
            let v = self.second[i].as_mut_slice();
            for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g.as_slice()[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    fn grads_for(value: f64) -> Gradients {
        // d/dw (value * w) = value
        let mut tape = Tape::new();
        let w_value = DenseMatrix::scalar(0.0);
        let w = tape.param(ParamId(0), &w_value);
        let c = tape.input(DenseMatrix::scalar(value));
        let prod = tape.matmul(w, c);
        tape.grad(prod).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut w = DenseMatrix::scalar(1.5);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), [&w]);
        adam.step(vec![&mut w], &grads_for(2.0)).unwrap();
        let after_one = w.as_slice()[0];
        let m1 = adam.first_moment(ParamId(0)).as_slice()[0];
        // a zero gradient with zeroed moments leaves the parameter put
        let mut fresh = DenseMatrix::scalar(1.5);
        let mut adam0 = AdamState::new(AdamConfig::with_lr(0.1), [&fresh]);
        adam0.step(vec![&mut fresh], &grads_for(0.0)).unwrap();
        assert_eq!(fresh.as_slice()[0], 1.5);
        // with momentum the moments decay
        adam.step(vec![&mut w], &grads_for(0.0)).unwrap();
        let m2 = adam.first_moment(ParamId(0)).as_slice()[0];
        assert!(m2.abs() < m1.abs());
        assert!(after_one < 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut w = DenseMatrix::scalar(0.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), [&w]);
        adam.step(vec![&mut w], &grads_for(4.0)).unwrap();
        approx::assert_abs_diff_eq!(w.as_slice()[0], -0.1, epsilon = 1e-8);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn repeated_steps_are_monotone() {
        let mut w = DenseMatrix::scalar(0.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.01), [&w]);
        let mut prev = 0.0;
        for _ in 0..2 {
            adam.step(vec![&mut w], &grads_for(-3.0)).unwrap();
            assert!(w.as_slice()[0] > prev);
            prev = w.as_slice()[0];
        }
        assert_eq!(adam.step_count(), 2);
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let mut w = DenseMatrix::zeros(2, 2);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), [&w]);
        let err = adam.step(vec![&mut w], &grads_for(1.0)).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}
