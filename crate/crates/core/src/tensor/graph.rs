use super::ops;
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    MatMul(Var, Var),
    /// `[m, n] + [n]` broadcast over rows.
    AddRow {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Softmax(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Patchify {
        x: Var,
        patch: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-use tape recording one forward pass.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn rows_cols(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        _ => shape_err(op, t.shape(), &[0, 0]),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a trainable parameter. Parameters are remembered in
    /// registration order so their gradients can be written back with
    /// [`Graph::accumulate_params`].
    pub fn param(&mut self, value: &Tensor) -> Var {
        let v = self.leaf(value.clone(), true);
        self.params.push(v);
        v
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d_parts(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            needs,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d(self.value(input), window, stride)?;
        let needs = self.needs(&[input]);
        Ok(self.push(out, Op::MaxPool { input, argmax }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let needs = self.needs(&[x]);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), needs))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.value(x), "add_row")?;
        let b = self.value(bias);
        if b.numel() != n {
            return shape_err("add_row", &[m, n], b.shape());
        }
        let bd = b.data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(&bd) {
                *v += bv;
            }
        }
        let needs = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddRow { x, bias }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err("add", av.shape(), bv.shape());
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err("mul", av.shape(), bv.shape());
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let out =
            Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * factor).collect()).expect("shape preserved");
        let needs = self.needs(&[x]);
        self.push(out, Op::Scale(x, factor), needs)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = ops::transpose(self.value(x))?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Transpose(x), needs))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = ops::softmax(self.value(x));
        let needs = self.needs(&[x]);
        self.push(out, Op::Softmax(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Columns `[start, end)` of a 2-d value.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = rows_cols(self.value(x), "slice_cols")?;
        if start >= end || end > n {
            return shape_err("slice_cols", &[m, n], &[start, end]);
        }
        let width = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * width);
        for row in src.chunks(n) {
            data.extend_from_slice(&row[start..end]);
        }
        let out = Tensor::new(vec![m, width], data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, needs))
    }

    /// Rows `[start, end)` of a 2-d value.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = rows_cols(self.value(x), "slice_rows")?;
        if start >= end || end > m {
            return shape_err("slice_rows", &[m, n], &[start, end]);
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let out = Tensor::new(vec![end - start, n], data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero parts".into()))?;
        let (m, _) = rows_cols(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = rows_cols(self.value(p), "concat_cols")?;
            if pm != m {
                return shape_err("concat_cols", self.shape(first), self.shape(p));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        let needs = self.needs(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero parts".into()))?;
        let (_, n) = rows_cols(self.value(first), "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = rows_cols(self.value(p), "concat_rows")?;
            if pn != n {
                return shape_err("concat_rows", self.shape(first), self.shape(p));
            }
            rows += pm;
        }
        let mut data = Vec::with_capacity(rows * n);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        let needs = self.needs(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Mean over rows, `[m, n] -> [1, n]`. Rows are summed in index order.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.value(x), "mean_rows")?;
        let mut acc = vec![0.0; n];
        for row in self.value(x).data().chunks(n) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let inv = m as f64;
        acc.iter_mut().for_each(|a| *a /= inv);
        let out = Tensor::new(vec![1, n], acc)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::MeanRows(x), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Layer normalization over the last axis of `[m, n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = rows_cols(self.value(x), "layer_norm")?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return shape_err("layer_norm", &[m, n], self.shape(gamma));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(x).data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Splits `[C, H, W]` into non-overlapping `patch x patch` tiles, one row
    /// per tile in row-major tile order, each row laid out `(c, dy, dx)`.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = match *xv.shape() {
            [c, h, w] => (c, h, w),
            _ => return shape_err("patchify", xv.shape(), &[0, 0, 0]),
        };
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Config(format!(
                "patch size {patch} does not tile a {h}x{w} image"
            )));
        }
        let (ph, pw) = (h / patch, w / patch);
        let dim = c * patch * patch;
        let mut data = Vec::with_capacity(ph * pw * dim);
        for (py, px) in (0..ph).flat_map(|py| (0..pw).map(move |px| (py, px))) {
            for ci in 0..c {
                for dy in 0..patch {
                    let start = (ci * h + py * patch + dy) * w + px * patch;
                    data.extend_from_slice(&xv.data()[start..start + patch]);
                }
            }
        }
        let out = Tensor::new(vec![ph * pw, dim], data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Patchify { x, patch }, needs))
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = Tensor::full(self.shape(loss), 1.0);
        self.backward_with(&[(loss, &seed)])
    }

    /// Backpropagates from arbitrary upstream gradients on one or more outputs.
    pub fn backward_with(&mut self, seeds: &[(Var, &Tensor)]) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("graph already consumed by a backward pass".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for &(v, g) in seeds {
            if g.shape() != self.shape(v) {
                return shape_err("backward seed", self.shape(v), g.shape());
            }
            accumulate(&mut grads[v.0], g.data());
            start = start.max(v.0 + 1);
        }
        for idx in (0..start).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradient of every registered parameter to the matching
    /// target tensor. Targets must be supplied in registration order.
    pub fn accumulate_params<'a>(&self, targets: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        let mut params = self.params.iter();
        for target in targets {
            let v = params
                .next()
                .ok_or_else(|| Error::Usage("more targets than registered parameters".into()))?;
            if target.shape() != self.shape(*v) {
                return shape_err("accumulate_params", target.shape(), self.shape(*v));
            }
            match self.grad(*v) {
                Some(g) => target.accumulate_grad(g)?,
                None => target.accumulate_grad(&vec![0.0; target.numel()])?,
            }
        }
        if params.next().is_some() {
            return Err(Error::Usage("fewer targets than registered parameters".into()));
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let up_t = Tensor::new(node.value.shape().to_vec(), up.to_vec())?;
                let (dx, dw, db) =
                    ops::conv2d_backward_parts(self.value(*input), self.value(*weight), &up_t, *stride, *padding)?;
                if wants(input) {
                    accumulate(&mut grads[input.0], dx.data());
                }
                if wants(weight) {
                    accumulate(&mut grads[weight.0], dw.data());
                }
                if wants(bias) {
                    accumulate(&mut grads[bias.0], db.data());
                }
            }
            Op::MaxPool { input, argmax } => {
                let g = grads[input.0].get_or_insert_with(|| vec![0.0; self.value(*input).numel()]);
                for (&src, u) in argmax.iter().zip(up) {
                    g[src] += u;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d: Vec<f64> = xv
                    .iter()
                    .zip(up)
                    .map(|(&v, &u)| if v > 0.0 { u } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if wants(a) {
                    // dA = up · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let urow = &up[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            da[i * k + p] = urow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                if wants(b) {
                    // dB = Aᵀ · up
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let urow = &up[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av_ip = av.data()[i * k + p];
                            for (d, u) in db[p * n..(p + 1) * n].iter_mut().zip(urow) {
                                *d += av_ip * u;
                            }
                        }
                    }
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::AddRow { x, bias } => {
                if wants(x) {
                    accumulate(&mut grads[x.0], up);
                }
                if wants(bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![0.0; n];
                    for row in up.chunks(n) {
                        for (d, u) in db.iter_mut().zip(row) {
                            *d += u;
                        }
                    }
                    accumulate(&mut grads[bias.0], &db);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], up);
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], up);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let d: Vec<f64> = up.iter().zip(self.value(*b).data()).map(|(u, y)| u * y).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if wants(b) {
                    let d: Vec<f64> = up.iter().zip(self.value(*a).data()).map(|(u, x)| u * x).collect();
                    accumulate(&mut grads[b.0], &d);
                }
            }
            Op::Scale(x, f) => {
                let d: Vec<f64> = up.iter().map(|u| u * f).collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Transpose(x) => {
                let up_t = Tensor::new(node.value.shape().to_vec(), up.to_vec())?;
                accumulate(&mut grads[x.0], ops::transpose(&up_t)?.data());
            }
            Op::Softmax(x) => {
                let up_t = Tensor::new(node.value.shape().to_vec(), up.to_vec())?;
                accumulate(&mut grads[x.0], ops::softmax_backward(&node.value, &up_t).data());
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], up),
            Op::SliceCols { x, start } => {
                let (m, n) = rows_cols(self.value(*x), "slice_cols")?;
                let width = node.value.shape()[1];
                let g = grads[x.0].get_or_insert_with(|| vec![0.0; m * n]);
                for i in 0..m {
                    for j in 0..width {
                        g[i * n + start + j] += up[i * width + j];
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.value.shape()[1];
                let total = self.value(*x).numel();
                let g = grads[x.0].get_or_insert_with(|| vec![0.0; total]);
                for (d, u) in g[start * n..].iter_mut().zip(up) {
                    *d += u;
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if wants(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&up[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(&mut grads[p.0], &d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if wants(p) {
                        accumulate(&mut grads[p.0], &up[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::MeanRows(x) => {
                let (m, _) = rows_cols(self.value(*x), "mean_rows")?;
                let inv = m as f64;
                let row: Vec<f64> = up.iter().map(|u| u / inv).collect();
                let d: Vec<f64> = (0..m).flat_map(|_| row.iter().copied()).collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Sum(x) => {
                let d = vec![up[0]; self.value(*x).numel()];
                accumulate(&mut grads[x.0], &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).numel();
                let gv = self.value(*gamma).data();
                if wants(gamma) || wants(beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (urow, hrow) in up.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += urow[j] * hrow[j];
                            db[j] += urow[j];
                        }
                    }
                    if wants(gamma) {
                        accumulate(&mut grads[gamma.0], &dg);
                    }
                    if wants(beta) {
                        accumulate(&mut grads[beta.0], &db);
                    }
                }
                if wants(x) {
                    let mut dx = Vec::with_capacity(up.len());
                    for ((urow, hrow), &is) in up.chunks(n).zip(xhat.chunks(n)).zip(inv_std) {
                        let dh: Vec<f64> = urow.iter().zip(gv).map(|(u, g)| u * g).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(d, h)| d * h).sum();
                        for j in 0..n {
                            dx.push(is / n as f64 * (n as f64 * dh[j] - sum_dh - hrow[j] * sum_dh_h));
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::Patchify { x, patch } => {
                let xv = self.value(*x);
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (ph, pw) = (h / patch, w / patch);
                let g = grads[x.0].get_or_insert_with(|| vec![0.0; c * h * w]);
                let mut k = 0;
                for (py, px) in (0..ph).flat_map(|py| (0..pw).map(move |px| (py, px))) {
                    for ci in 0..c {
                        for dy in 0..*patch {
                            let start = (ci * h + py * patch + dy) * w + px * patch;
                            for d in &mut g[start..start + patch] {
                                *d += up[k];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_twice_x() {
        let mut g = Graph::new();
        let xv = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let x = g.leaf(xv.clone(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let expected: Vec<f64> = xv.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), expected.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::ones(&[2]));
        let p = g.param(&Tensor::ones(&[2]));
        let y = g.mul(c, p).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn accumulate_params_checks_count() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::ones(&[2]));
        let s = g.sum(p);
        g.backward(s).unwrap();
        let mut a = Tensor::ones(&[2]);
        let mut b = Tensor::ones(&[2]);
        assert!(g.accumulate_params([&mut a, &mut b]).is_err());
        let mut c = Tensor::ones(&[2]);
        g.accumulate_params([&mut c]).unwrap();
        assert_eq!(c.grad().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn patchify_orders_tiles_row_major() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 4, 4], |i| i as f64));
        let p = g.patchify(x, 2).unwrap();
        assert_eq!(g.shape(p), &[4, 4]);
        assert_eq!(&g.value(p).data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&g.value(p).data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert!(g.patchify(x, 3).is_err());
    }
}
