//! Hybrid attention / selective-SSM language model toolkit.

pub mod attention;
pub mod bench;
pub mod conversion;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod loss;
pub mod mamba;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::{SeededRng, Tensor};
