//! Horizontally scalable hybrid CNN/transformer classifier.
//!
//! A convolutional front end turns each kernel's final feature map into one
//! image-level token. Tokens are split into attention groups, each group runs
//! its own self-attention stack with a private CLS token, and the CLS outputs
//! are mean-pooled into a linear head. Because groups never exchange
//! activations, the model runs unchanged across cooperating workers that
//! trade only CLS vectors and their gradients.

pub mod analytics;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod executor;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ConvKernel, Graph, Tensor, Var};
