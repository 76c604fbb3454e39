use super::{join, Initializer, Parameterized};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Pre-norm multi-head self-attention with a residual connection:
/// `y = x + (softmax(QKᵀ/√d_h) V) W_o + b_o` where Q, K, V are projections
/// of `LayerNorm(x)`. There is no feed-forward sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct MhsaBlock {
    pub num_heads: usize,
    pub dim: usize,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

pub struct BoundMhsa {
    num_heads: usize,
    dim: usize,
    ln_gamma: Var,
    ln_beta: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
}

impl MhsaBlock {
    pub fn new(init: &mut Initializer, dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || !dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "embedding dim {dim} is not divisible by {num_heads} heads"
            )));
        }
        Ok(Self {
            num_heads,
            dim,
            ln_gamma: init.ones(&[dim]),
            ln_beta: init.zeros(&[dim]),
            wq: init.fan_in_uniform(&[dim, dim], dim),
            bq: init.zeros(&[dim]),
            wk: init.fan_in_uniform(&[dim, dim], dim),
            bk: init.zeros(&[dim]),
            wv: init.fan_in_uniform(&[dim, dim], dim),
            bv: init.zeros(&[dim]),
            wo: init.fan_in_uniform(&[dim, dim], dim),
            bo: init.zeros(&[dim]),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(tokens)?.0)
    }

    /// Output plus the per-head `[T, T]` attention matrices.
    pub fn forward_traced(&self, tokens: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let x = g.constant(tokens.clone());
        let bound = self.bind(&mut g);
        let (y, attn) = bound.apply_traced(&mut g, x)?;
        let weights = attn.into_iter().map(|a| g.value(a).clone()).collect();
        Ok((g.value(y).clone(), weights))
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMhsa {
        BoundMhsa {
            num_heads: self.num_heads,
            dim: self.dim,
            ln_gamma: g.param(&self.ln_gamma),
            ln_beta: g.param(&self.ln_beta),
            wq: g.param(&self.wq),
            bq: g.param(&self.bq),
            wk: g.param(&self.wk),
            bk: g.param(&self.bk),
            wv: g.param(&self.wv),
            bv: g.param(&self.bv),
            wo: g.param(&self.wo),
            bo: g.param(&self.bo),
        }
    }
}

impl BoundMhsa {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.apply_traced(g, x)?.0)
    }

    pub fn apply_traced(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<Var>)> {
        match *g.shape(x) {
            [_, d] if d == self.dim => {}
            _ => return shape_err("mhsa", g.shape(x), &[0, self.dim]),
        }
        let h = g.layer_norm(x, self.ln_gamma, self.ln_beta, LAYER_NORM_EPS)?;
        let q = g.matmul(h, self.wq)?;
        let q = g.add_row(q, self.bq)?;
        let k = g.matmul(h, self.wk)?;
        let k = g.add_row(k, self.bk)?;
        let v = g.matmul(h, self.wv)?;
        let v = g.add_row(v, self.bv)?;

        let head_dim = self.dim / self.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        let mut weights = Vec::with_capacity(self.num_heads);
        for head in 0..self.num_heads {
            let (lo, hi) = (head * head_dim, (head + 1) * head_dim);
            let (qh, kh, vh) = if self.num_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, lo, hi)?,
                    g.slice_cols(k, lo, hi)?,
                    g.slice_cols(v, lo, hi)?,
                )
            };
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            weights.push(attn);
            heads.push(g.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let out = g.matmul(merged, self.wo)?;
        let out = g.add_row(out, self.bo)?;
        Ok((g.add(x, out)?, weights))
    }
}

impl Parameterized for MhsaBlock {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "ln.gamma"), &self.ln_gamma));
        out.push((join(prefix, "ln.beta"), &self.ln_beta));
        out.push((join(prefix, "wq"), &self.wq));
        out.push((join(prefix, "bq"), &self.bq));
        out.push((join(prefix, "wk"), &self.wk));
        out.push((join(prefix, "bk"), &self.bk));
        out.push((join(prefix, "wv"), &self.wv));
        out.push((join(prefix, "bv"), &self.bv));
        out.push((join(prefix, "wo"), &self.wo));
        out.push((join(prefix, "bo"), &self.bo));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "ln.gamma"), &mut self.ln_gamma));
        out.push((join(prefix, "ln.beta"), &mut self.ln_beta));
        out.push((join(prefix, "wq"), &mut self.wq));
        out.push((join(prefix, "bq"), &mut self.bq));
        out.push((join(prefix, "wk"), &mut self.wk));
        out.push((join(prefix, "bk"), &mut self.bk));
        out.push((join(prefix, "wv"), &mut self.wv));
        out.push((join(prefix, "bv"), &mut self.bv));
        out.push((join(prefix, "wo"), &mut self.wo));
        out.push((join(prefix, "bo"), &mut self.bo));
    }
}
