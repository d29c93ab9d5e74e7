//! Open-vocabulary keypoint detection with domain-distribution matching.

pub mod autograd;
pub mod error;
pub mod eval;
pub mod grouping;
pub mod heatmap;
pub mod hungarian;
pub mod kemb;
pub mod matching;
pub mod network;
pub mod synthworld;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod text;

pub use error::{KdsmError, Result};
pub use tensor::Tensor;
