//! Tokenizer objectives, training and token assignment.

mod assign;
mod loss;
mod model;

pub use assign::{assign_tokens, collision_rate, disambiguate, is_unique, prefix_agreement_at_1, random_tokens, SemanticTokenTuple};
pub use loss::{cl_on_tape, loss_cl, loss_mse, loss_rq, mse_on_tape, rq_on_tape, total_loss, LossComponents, LossMode};
pub(crate) use model::write_json;
pub use model::{encode_codes, fit, BatchGraph, FitOutput, StepRecord, TokenizerConfig, TokenizerModel, TraceEvent};
