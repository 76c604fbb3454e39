use super::{join, Initializer, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::{ConvKernel, Graph, Tensor, Var};

/// Two 3x3 convolutions (stride 1, padding 1), each followed by ReLU, then a
/// `pool_window x pool_window` max-pool with matching stride. A window of 1
/// leaves the spatial extent unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv1: ConvKernel,
    pub conv2: ConvKernel,
    pub pool_window: usize,
}

pub struct BoundConvBlock {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    pool_window: usize,
}

const KERNEL: usize = 3;
const PADDING: usize = 1;

impl ConvBlock {
    pub fn new(init: &mut Initializer, in_channels: usize, kernels: usize, pool_window: usize) -> Result<Self> {
        if in_channels == 0 || kernels == 0 || pool_window == 0 {
            return Err(Error::Config(format!(
                "conv block needs positive channels and pool window, got in={in_channels} out={kernels} pool={pool_window}"
            )));
        }
        let fan1 = in_channels * KERNEL * KERNEL;
        let fan2 = kernels * KERNEL * KERNEL;
        let conv1 = ConvKernel::new(
            init.fan_in_uniform(&[kernels, in_channels, KERNEL, KERNEL], fan1),
            init.fan_in_uniform(&[kernels], fan1),
            1,
            PADDING,
        )?;
        let conv2 = ConvKernel::new(
            init.fan_in_uniform(&[kernels, kernels, KERNEL, KERNEL], fan2),
            init.fan_in_uniform(&[kernels], fan2),
            1,
            PADDING,
        )?;
        Ok(Self {
            conv1,
            conv2,
            pool_window,
        })
    }

    pub fn kernels(&self) -> usize {
        self.conv2.out_channels()
    }

    /// Spatial extent after this block, or a configuration error when the
    /// pool window does not divide the input extent.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.pool_window;
        if !h.is_multiple_of(p) || !w.is_multiple_of(p) || h < p || w < p {
            return Err(Error::Config(format!(
                "conv block input {h}x{w} is not divisible by pool window {p}"
            )));
        }
        Ok((h / p, w / p))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let bound = self.bind(&mut g);
        let y = bound.apply(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn bind(&self, g: &mut Graph) -> BoundConvBlock {
        BoundConvBlock {
            w1: g.param(&self.conv1.weights),
            b1: g.param(&self.conv1.bias),
            w2: g.param(&self.conv2.weights),
            b2: g.param(&self.conv2.bias),
            pool_window: self.pool_window,
        }
    }
}

impl BoundConvBlock {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if let [_, h, w] = *g.shape(x) {
            let p = self.pool_window;
            if h % p != 0 || w % p != 0 {
                return Err(Error::Config(format!(
                    "conv block input {h}x{w} is not divisible by pool window {p}"
                )));
            }
        }
        let y = g.conv2d(x, self.w1, self.b1, 1, PADDING)?;
        let y = g.relu(y);
        let y = g.conv2d(y, self.w2, self.b2, 1, PADDING)?;
        let y = g.relu(y);
        if self.pool_window == 1 {
            Ok(y)
        } else {
            g.maxpool2d(y, self.pool_window, self.pool_window)
        }
    }
}

impl Parameterized for ConvBlock {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "conv1.weight"), &self.conv1.weights));
        out.push((join(prefix, "conv1.bias"), &self.conv1.bias));
        out.push((join(prefix, "conv2.weight"), &self.conv2.weights));
        out.push((join(prefix, "conv2.bias"), &self.conv2.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "conv1.weight"), &mut self.conv1.weights));
        out.push((join(prefix, "conv1.bias"), &mut self.conv1.bias));
        out.push((join(prefix, "conv2.weight"), &mut self.conv2.weights));
        out.push((join(prefix, "conv2.bias"), &mut self.conv2.bias));
    }
}
