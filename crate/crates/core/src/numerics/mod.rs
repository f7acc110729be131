//! Dense matrices, a reverse-mode tape, small MLPs and Adam.

mod adam;
mod matrix;
mod mlp;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use matrix::{dot, norm, squared_distance, DenseMatrix};
pub use mlp::{mlp_forward, Activation, Layer, MlpParams};
pub use tape::{log_sum_exp, softmax_in_place, AttentionBlock, Gradients, ParamId, Tape, Var};
