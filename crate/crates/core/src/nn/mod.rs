//! Trainable building blocks: convolutional block, multi-head
//! self-attention block, linear layer, plus AdamW and the cosine schedule.

mod conv_block;
mod init;
mod linear;
mod mhsa;
mod optim;

pub use conv_block::{BoundConvBlock, ConvBlock};
pub use init::Initializer;
pub use linear::{BoundLinear, Linear};
pub use mhsa::{BoundMhsa, MhsaBlock, LAYER_NORM_EPS};
pub use optim::{cosine_lr, AdamW};

use crate::tensor::Tensor;

/// Anything that owns named trainable tensors.
///
/// Both visitors must yield parameters in the same order, and that order is
/// the order in which the block registers them on a graph.
pub trait Parameterized {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);

    fn param_count(&self) -> usize {
        let mut v = Vec::new();
        self.params("", &mut v);
        v.iter().map(|(_, t)| t.numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, item) in self.iter().enumerate() {
            item.params(&join(prefix, &i.to_string()), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, item) in self.iter_mut().enumerate() {
            item.params_mut(&join(prefix, &i.to_string()), out);
        }
    }
}
