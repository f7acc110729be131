//! Contrastive residual-quantization semantic tokenizer and a generative
//! retrieval pipeline built on top of it.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod evaluator;
pub mod generator;
pub mod numerics;
pub mod quantizer;
pub mod seed;
pub mod tokenizer;

pub use error::{Error, LoadError, Result};
