use super::{join, Initializer, Parameterized};
use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

pub struct BoundLinear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(init: &mut Initializer, input: usize, output: usize) -> Self {
        Self {
            weight: init.fan_in_uniform(&[input, output], input),
            bias: init.zeros(&[output]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph) -> BoundLinear {
        BoundLinear {
            weight: g.param(&self.weight),
            bias: g.param(&self.bias),
        }
    }
}

impl BoundLinear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_row(y, self.bias)
    }
}

impl Parameterized for Linear {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}
