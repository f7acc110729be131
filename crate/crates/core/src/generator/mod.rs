//! Encoder-decoder generator over semantic tokens, with beam-search retrieval.

mod beam;
mod model;
mod train;
mod vocab;

pub use beam::{beam_search, filter_beams, format_retrieval, next_token_log_probs, retrieve, retrieve_test_cases, score_tuples, Beam, Retrieval};
pub use model::{GeneratorConfig, GeneratorModel, PackedInputs};
pub use train::{evaluate_pairs, pack_pairs, train_generator, training_pairs, GeneratorFit, GeneratorStep, TrainingPair};
pub use vocab::{flatten_sequence, TokenItemTable, TokenVocabulary};
