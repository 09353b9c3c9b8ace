//! Channel pruning and knowledge distillation for small unconditional convolutional
//! GANs, with content-aware variants of both, plus the evaluation and editing tools
//! used to judge the compressed generators.

pub mod content;
pub mod dataset;
pub mod distill;
pub mod editing;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pruning;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
