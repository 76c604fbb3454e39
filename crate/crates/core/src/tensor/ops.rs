//! Forward kernels and their local backward rules, free of any tape.
//!
//! Everything here is pure: inputs are borrowed and never modified.

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Convolution weights `[out, in, kh, kw]`, bias `[out]`, and geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    pub weights: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if weights.rank() != 4 {
            return shape_err("conv kernel", weights.shape(), &[0, 0, 0, 0]);
        }
        if bias.shape() != [weights.shape()[0]] {
            return shape_err("conv kernel bias", weights.shape(), bias.shape());
        }
        if stride == 0 {
            return Err(Error::Config("convolution stride must be positive".into()));
        }
        Ok(Self {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }
}

/// Output extent of a sliding window, or a configuration error when the
/// window does not tile the padded input to an integer count.
pub fn window_extent(input: usize, window: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if window == 0 || stride == 0 || window > padded {
        return Err(Error::Config(format!(
            "window {window} (stride {stride}, padding {padding}) does not fit extent {input}"
        )));
    }
    if !(padded - window).is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "extent {input} with window {window}, stride {stride}, padding {padding} gives a non-integer output extent"
        )));
    }
    Ok((padded - window) / stride + 1)
}

fn chw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => shape_err(op, t.shape(), &[0, 0, 0]),
    }
}

/// Range of output positions `o` for which `o * stride + offset - padding`
/// lands inside `[0, extent)`.
fn valid_range(out: usize, extent: usize, stride: usize, offset: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > offset {
        (padding - offset).div_ceil(stride)
    } else {
        0
    };
    // o * stride + offset - padding <= extent - 1
    let hi_num = extent + padding - 1;
    let hi = if hi_num < offset {
        0
    } else {
        ((hi_num - offset) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Cross-correlation of `[C, H, W]` with `kernel` (no flip).
pub fn conv2d(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    conv2d_parts(input, &kernel.weights, &kernel.bias, kernel.stride, kernel.padding)
}

pub(crate) fn conv2d_parts(input: &Tensor, weights: &Tensor, bias: &Tensor, s: usize, p: usize) -> Result<Tensor> {
    let (c, h, w) = chw(input, "conv2d")?;
    if weights.rank() != 4 || c != weights.shape()[1] {
        return shape_err("conv2d", input.shape(), weights.shape());
    }
    if bias.shape() != [weights.shape()[0]] {
        return shape_err("conv2d bias", weights.shape(), bias.shape());
    }
    let (oc, kh, kw) = (weights.shape()[0], weights.shape()[2], weights.shape()[3]);
    let oh = window_extent(h, kh, s, p)?;
    let ow = window_extent(w, kw, s, p)?;
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = bias.data()[o]);
        for ci in 0..c {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                let (y0, y1) = valid_range(oh, h, s, ki, p);
                for kj in 0..kw {
                    let wv = wt[((o * c + ci) * kh + ki) * kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(ow, w, s, kj, p);
                    for y in y0..y1 {
                        let iy = y * s + ki - p;
                        let row = &xin[iy * w..(iy + 1) * w];
                        let orow = &mut plane[y * ow..(y + 1) * ow];
                        for xo in x0..x1 {
                            orow[xo] += wv * row[xo * s + kj - p];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oc, oh, ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward(input: &Tensor, kernel: &ConvKernel, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    conv2d_backward_parts(input, &kernel.weights, grad_out, kernel.stride, kernel.padding)
}

pub(crate) fn conv2d_backward_parts(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    s: usize,
    p: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, w) = chw(input, "conv2d_backward")?;
    let (oc, oh, ow) = chw(grad_out, "conv2d_backward")?;
    let (kh, kw) = (weights.shape()[2], weights.shape()[3]);
    let x = input.data();
    let wt = weights.data();
    let g = grad_out.data();
    let mut dx = vec![0.0; c * h * w];
    let mut dw = vec![0.0; wt.len()];
    let mut db = vec![0.0; oc];
    for o in 0..oc {
        let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
        db[o] = gplane.iter().sum();
        for ci in 0..c {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            let dxin = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                let (y0, y1) = valid_range(oh, h, s, ki, p);
                for kj in 0..kw {
                    let widx = ((o * c + ci) * kh + ki) * kw + kj;
                    let wv = wt[widx];
                    let (x0, x1) = valid_range(ow, w, s, kj, p);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y * s + ki - p;
                        let grow = &gplane[y * ow..(y + 1) * ow];
                        let row = &xin[iy * w..(iy + 1) * w];
                        let drow = &mut dxin[iy * w..(iy + 1) * w];
                        for xo in x0..x1 {
                            let ix = xo * s + kj - p;
                            acc += grow[xo] * row[ix];
                            drow[ix] += grow[xo] * wv;
                        }
                    }
                    dw[widx] = acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(weights.shape().to_vec(), dw)?,
        Tensor::new(vec![oc], db)?,
    ))
}

/// Per-window maximum over `[C, H, W]`. Also returns, for every output
/// element, the flat input index that produced it (first index on ties).
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = chw(input, "maxpool2d")?;
    if window > h || window > w {
        return Err(Error::Config(format!(
            "pool window {window} exceeds input extent {h}x{w}"
        )));
    }
    let oh = window_extent(h, window, stride, 0)?;
    let ow = window_extent(w, window, stride, 0)?;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = ci * h * w + (y * stride) * w + xo * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = ci * h * w + (y * stride + dy) * w + xo * stride + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.numel() {
        return shape_err("maxpool2d_backward", grad_out.shape(), &[argmax.len()]);
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&src, &g) in argmax.iter().zip(grad_out.data()) {
        d[src] += g;
    }
    Ok(dx)
}

fn mk(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, k] => Ok((m, k)),
        _ => shape_err(op, t.shape(), &[0, 0]),
    }
}

/// Row-major `[m, k] x [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = mk(a, "matmul")?;
    let (k2, n) = mk(b, "matmul")?;
    if k != k2 {
        return shape_err("matmul", a.shape(), b.shape());
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = mk(a, "transpose")?;
    let d = a.data();
    Ok(Tensor::from_fn(&[n, m], |idx| {
        let (j, i) = (idx / m, idx % m);
        d[i * n + j]
    }))
}

/// Softmax along the last axis with max subtraction.
pub fn softmax(input: &Tensor) -> Tensor {
    let n = *input.shape().last().expect("tensor rank is at least one");
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(input.shape().to_vec(), out).expect("shape preserved")
}

/// Given softmax output `y` and upstream `dy`, returns `dx`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let n = *y.shape().last().expect("tensor rank is at least one");
    let mut dx = vec![0.0; y.numel()];
    for ((yr, gr), dr) in y.data().chunks(n).zip(dy.data().chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("shape preserved")
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor::new(
        input.shape().to_vec(),
        input.data().iter().map(|&v| v.max(0.0)).collect(),
    )
    .expect("shape preserved")
}

/// Softmax cross-entropy of a logit vector against `label`.
/// Returns the loss and `dloss/dlogits`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let n = logits.numel();
    if label >= n {
        return Err(Error::Usage(format!("label {label} out of range for {n} classes")));
    }
    let flat = logits.clone().reshape(&[n])?;
    let mut probs = softmax(&flat);
    let loss = -probs.data()[label].ln();
    probs.data_mut()[label] -= 1.0;
    Ok((loss, probs.reshape(logits.shape())?))
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
