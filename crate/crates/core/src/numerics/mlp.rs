use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{gemm, DenseMatrix};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// One affine layer `y = act(x W + b)` with `W` stored `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: DenseMatrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::Config(format!(
                "bias length {} does not match weight output width {}",
                bias.len(),
                weight.cols()
            )));
        }
        Ok(Layer { weight, bias: DenseMatrix::row_vector(&bias), activation })
    }
}

/// A stack of affine layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(Error::Config(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    pair[0].weight.cols(),
                    i + 1,
                    pair[1].weight.rows()
                )));
            }
        }
        Ok(MlpParams { layers })
    }

    /// Glorot-initialized network through `dims` (input, hidden.., output).
    /// Hidden layers use the rectifier, the last layer `output`.
    pub fn init<R: Rng>(dims: &[usize], output: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output widths".into()));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| Layer {
                weight: DenseMatrix::glorot(dims[i], dims[i + 1], rng),
                bias: DenseMatrix::zeros(1, dims[i + 1]),
                activation: if i + 1 == n { output } else { Activation::Relu },
            })
            .collect();
        Ok(MlpParams { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    /// Widths of every layer boundary, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.weight.cols()));
        d
    }

    pub fn num_params(&self) -> usize {
        2 * self.layers.len()
    }

    /// `[w0, b0, w1, b1, ...]`
    pub fn parameters(&self) -> Vec<&DenseMatrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut DenseMatrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Forward pass on a batch (one example per row).
    pub fn forward_batch(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if h.cols() != layer.weight.rows() {
                return Err(Error::Config(format!(
                    "layer {} expects input width {}, got {}",
                    i,
                    layer.weight.rows(),
                    h.cols()
                )));
            }
            let mut out = DenseMatrix::zeros(h.rows(), layer.weight.cols());
            gemm(&h, false, &layer.weight, false, &mut out, 0.0);
            let bias = layer.bias.as_slice();
            for r in 0..out.rows() {
                for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                    *o += b;
                    if layer.activation == Activation::Relu {
                        *o = o.max(0.0);
                    }
                }
            }
            h = out;
        }
        Ok(h)
    }

    /// Records the forward pass; `params` are this network's bound parameters
    /// in [`MlpParams::parameters`] order.
    pub fn forward_tape(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        debug_assert_eq!(params.len(), self.num_params());
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let width = tape.value(h).cols();
            if width != layer.weight.rows() {
                return Err(Error::Config(format!(
                    "layer {} expects input width {}, got {}",
                    i,
                    layer.weight.rows(),
                    width
                )));
            }
            let a = tape.matmul(h, params[2 * i]);
            let a = tape.add_row(a, params[2 * i + 1]);
            h = match layer.activation {
                Activation::Relu => tape.relu(a),
                Activation::Identity => a,
            };
        }
        Ok(h)
    }
}

/// Evaluates the network on a single vector.
pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(params.forward_batch(&DenseMatrix::row_vector(x))?.into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, b: f64, act: Activation) -> MlpParams {
        MlpParams::from_layers(vec![Layer::new(DenseMatrix::scalar(w), vec![b], act).unwrap()]).unwrap()
    }

    #[test]
    fn identity_network_passes_input_through() {
        let layer = Layer::new(DenseMatrix::identity(2), vec![0.0, 0.0], Activation::Identity).unwrap();
        let mlp = MlpParams::from_layers(vec![layer]).unwrap();
        assert_eq!(mlp_forward(&mlp, &[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
    }

    #[test]
    fn affine_then_rectifier() {
        assert_eq!(mlp_forward(&single(2.0, 1.0, Activation::Relu), &[3.0]).unwrap(), vec![7.0]);
        assert_eq!(mlp_forward(&single(1.0, -5.0, Activation::Relu), &[2.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let mut rng = rand::thread_rng();
        let mlp = MlpParams::init(&[3, 4, 2], Activation::Identity, &mut rng).unwrap();
        let err = mlp_forward(&mlp, &[1.0, 2.0]).unwrap_err().to_string();
        assert!(err.contains("layer 0"), "{err}");
    }

    #[test]
    fn incompatible_layers_rejected() {
        let a = Layer::new(DenseMatrix::zeros(2, 3), vec![0.0; 3], Activation::Relu).unwrap();
        let b = Layer::new(DenseMatrix::zeros(4, 1), vec![0.0], Activation::Identity).unwrap();
        let err = MlpParams::from_layers(vec![a, b]).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
    }

    #[test]
    fn forward_is_bit_deterministic_and_matches_tape() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mlp = MlpParams::init(&[5, 7, 3], Activation::Identity, &mut rng).unwrap();
        let x = DenseMatrix::uniform(4, 5, 1.0, &mut rng);
        let a = mlp.forward_batch(&x).unwrap();
        let b = mlp.forward_batch(&x).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());

        let mut tape = Tape::new();
        let params = tape.bind_params(mlp.parameters());
        let xv = tape.input(x);
        let y = mlp.forward_tape(&mut tape, &params, xv).unwrap();
        assert_eq!(tape.value(y).as_slice(), a.as_slice());
    }
}
