//! Forward and backward kernels for the layer types the models use.
//!
//! Convolution is direct (no FFT or Winograd): each sample is lowered to a
//! column matrix including zero taps for padding, and every output element
//! starts from its bias and accumulates exactly `k * k * c_in` products in the
//! order (kernel row, kernel col, input channel). Padded taps are multiplied
//! like any other, so the instrumented MAC count is exactly
//! `out_h * out_w * k^2 * c_in * c_out`.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::gemm;
use crate::tensor::{Element, Result, Shape, Tensor, TensorError};

/// Counts multiply-accumulates actually executed by [`conv2d_counted`].
#[derive(Debug, Default)]
pub struct MacCounter(AtomicU64);

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) -> u64 {
        self.0.swap(0, Ordering::Relaxed)
    }

    fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, pad: usize) -> Self {
        ConvGeometry { stride, pad }
    }

    pub fn out_dim(&self, input: usize, k: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < k || self.stride == 0 {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }
}

fn mismatch(op: &'static str, dim: &'static str, expected: usize, actual: usize) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        dim,
        expected,
        actual,
    }
}

/// Output shape of a convolution, validating every dimension.
pub fn conv2d_shape(x: Shape, w: Shape, bias_len: usize, geom: ConvGeometry) -> Result<Shape> {
    const OP: &str = "conv2d";
    if w.h != w.w {
        return Err(mismatch(OP, "kernel width", w.h, w.w));
    }
    if w.h == 0 {
        return Err(TensorError::InvalidArgument {
            op: OP,
            reason: "kernel size must be at least 1".into(),
        });
    }
    if geom.stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: OP,
            reason: "stride must be at least 1".into(),
        });
    }
    if x.c != w.c {
        return Err(mismatch(OP, "input channels", w.c, x.c));
    }
    if bias_len != w.n {
        return Err(mismatch(OP, "bias length", w.n, bias_len));
    }
    let oh = geom.out_dim(x.h, w.h).ok_or_else(|| mismatch(OP, "input height", w.h, x.h + 2 * geom.pad))?;
    let ow = geom.out_dim(x.w, w.w).ok_or_else(|| mismatch(OP, "input width", w.w, x.w + 2 * geom.pad))?;
    Ok(Shape::new(x.n, w.n, oh, ow))
}

/// Lowers one sample into a `[k*k*c_in, out_h*out_w]` matrix whose rows are
/// ordered (kernel row, kernel col, input channel). Padded taps are zeros.
fn im2col<T: Element>(x: &[T], s: Shape, k: usize, geom: ConvGeometry, oh: usize, ow: usize) -> Vec<T> {
    let (stride, pad) = (geom.stride as isize, geom.pad as isize);
    let p = oh * ow;
    let mut col = vec![T::zero(); k * k * s.c * p];
    for kh in 0..k {
        for kw in 0..k {
            for ci in 0..s.c {
                let row = ((kh * k + kw) * s.c + ci) * p;
                let plane = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
                for oy in 0..oh {
                    let iy = oy as isize * stride + kh as isize - pad;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * stride + kw as isize - pad;
                        if ix >= 0 && ix < s.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a column matrix back onto one sample's input gradient.
fn col2im(col: &[f64], s: Shape, k: usize, geom: ConvGeometry, oh: usize, ow: usize, dx: &mut [f64]) {
    let (stride, pad) = (geom.stride as isize, geom.pad as isize);
    let p = oh * ow;
    for kh in 0..k {
        for kw in 0..k {
            for ci in 0..s.c {
                let row = ((kh * k + kw) * s.c + ci) * p;
                let plane = &mut dx[ci * s.h * s.w..(ci + 1) * s.h * s.w];
                for oy in 0..oh {
                    let iy = oy as isize * stride + kh as isize - pad;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for ox in 0..ow {
                        let ix = ox as isize * stride + kw as isize - pad;
                        if ix >= 0 && ix < s.w as isize {
                            dst[ix as usize] += col[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[c_out, c_in, k, k]` reordered to `[c_out, k, k, c_in]`, matching the
/// im2col row order.
fn weight_rows<T: Element>(w: &Tensor<T>) -> Vec<T> {
    let s = w.shape();
    let (cin, k) = (s.c, s.h);
    let mut out = Vec::with_capacity(s.numel());
    for co in 0..s.n {
        for kh in 0..k {
            for kw in 0..k {
                for ci in 0..cin {
                    out.push(w.data()[((co * cin + ci) * k + kh) * k + kw]);
                }
            }
        }
    }
    out
}

pub fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, bias: &[T], geom: ConvGeometry) -> Result<Tensor<T>> {
    conv2d_counted(x, w, bias, geom, None)
}

/// Direct convolution; when `counter` is given, every executed
/// multiply-accumulate is tallied into it.
pub fn conv2d_counted<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &[T],
    geom: ConvGeometry,
    counter: Option<&MacCounter>,
) -> Result<Tensor<T>> {
    let out_shape = conv2d_shape(x.shape(), w.shape(), bias.len(), geom)?;
    let xs = x.shape();
    let k = w.shape().h;
    let (cout, kk) = (out_shape.c, k * k * xs.c);
    let p = out_shape.h * out_shape.w;
    let wr = weight_rows(w);
    let mut out = vec![T::zero(); out_shape.numel()];

    out.par_chunks_mut(cout * p).enumerate().for_each(|(n, sample)| {
        let xin = &x.data()[n * xs.c * xs.h * xs.w..(n + 1) * xs.c * xs.h * xs.w];
        let col = im2col(xin, xs, k, geom, out_shape.h, out_shape.w);
        for (co, plane) in sample.chunks_mut(p).enumerate() {
            plane.iter_mut().for_each(|v| *v = bias[co]);
        }
        let macs = gemm::gemm_acc(cout, p, kk, &wr, &col, sample);
        if let Some(c) = counter {
            c.add(macs);
        }
    });

    let out = Tensor::new(out_shape, out)?;
    out.check_finite("conv2d")?;
    Ok(out)
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads {
    pub x: Option<Tensor<f64>>,
    pub w: Tensor<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    gy: &Tensor<f64>,
    geom: ConvGeometry,
    need_x: bool,
) -> Result<ConvGrads> {
    let xs = x.shape();
    let ws = w.shape();
    let gs = gy.shape();
    let expected = conv2d_shape(xs, ws, ws.n, geom)?;
    if expected != gs {
        return Err(mismatch("conv2d_backward", "output gradient elements", expected.numel(), gs.numel()));
    }
    let (cin, cout, k) = (xs.c, ws.n, ws.h);
    let (oh, ow) = (gs.h, gs.w);
    let p = oh * ow;
    let kk = k * k * cin;
    let in_sz = cin * xs.h * xs.w;
    let gd = gy.data();

    let mut gb = vec![0.0; cout];
    for n in 0..xs.n {
        for (co, b) in gb.iter_mut().enumerate() {
            let start = (n * cout + co) * p;
            *b += gd[start..start + p].iter().sum::<f64>();
        }
    }

    // Per-sample column matrices, reused by both gradients.
    let cols: Vec<Vec<f64>> = (0..xs.n)
        .into_par_iter()
        .map(|n| im2col(&x.data()[n * in_sz..(n + 1) * in_sz], xs, k, geom, oh, ow))
        .collect();

    // dW rows in (kh, kw, ci) order; samples reduced in ascending order.
    let mut gwr = vec![0.0; cout * kk];
    for (n, col) in cols.iter().enumerate() {
        let col_t = gemm::transpose(col, kk, p);
        gemm::gemm_acc(cout, kk, p, &gd[n * cout * p..(n + 1) * cout * p], &col_t, &mut gwr);
    }
    let mut gw = vec![0.0; ws.numel()];
    for co in 0..cout {
        for kh in 0..k {
            for kw in 0..k {
                for ci in 0..cin {
                    gw[((co * cin + ci) * k + kh) * k + kw] = gwr[co * kk + (kh * k + kw) * cin + ci];
                }
            }
        }
    }

    let gx = if need_x {
        let wt = gemm::transpose(&weight_rows(w), cout, kk);
        let mut gx = vec![0.0; xs.numel()];
        gx.par_chunks_mut(in_sz).enumerate().for_each(|(n, dx)| {
            let mut dcol = vec![0.0; kk * p];
            gemm::gemm_acc(kk, p, cout, &wt, &gd[n * cout * p..(n + 1) * cout * p], &mut dcol);
            col2im(&dcol, xs, k, geom, oh, ow, dx);
        });
        Some(Tensor::new(xs, gx)?)
    } else {
        None
    };

    Ok(ConvGrads {
        x: gx,
        w: Tensor::new(ws, gw)?,
        bias: gb,
    })
}

/// Per-channel batch-norm parameters and statistics.
#[derive(Debug, Clone, Copy)]
pub struct BnParams<'a, T> {
    pub gamma: &'a [T],
    pub beta: &'a [T],
    pub running_mean: &'a [T],
    pub running_var: &'a [T],
    pub eps: f64,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over N·H·W.
    pub var: Vec<f64>,
}

fn check_bn<T>(x: Shape, p: &BnParams<'_, T>) -> Result<()> {
    for (dim, len) in [
        ("gamma length", p.gamma.len()),
        ("beta length", p.beta.len()),
        ("running mean length", p.running_mean.len()),
        ("running var length", p.running_var.len()),
    ] {
        if len != x.c {
            return Err(mismatch("batch_norm", dim, x.c, len));
        }
    }
    if !(p.eps > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "batch_norm",
            reason: format!("eps must be positive, got {}", p.eps),
        });
    }
    Ok(())
}

pub fn batch_stats<T: Element>(x: &Tensor<T>) -> BatchStats {
    let s = x.shape();
    let m = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut sum = 0.0;
        for n in 0..s.n {
            let start = (n * s.c + c) * s.plane();
            sum += x.data()[start..start + s.plane()].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = sum / m;
        let mut sq = 0.0;
        for n in 0..s.n {
            let start = (n * s.c + c) * s.plane();
            sq += x.data()[start..start + s.plane()]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = mu;
        var[c] = sq / m;
    }
    BatchStats { mean, var }
}

fn normalize<T: Element>(x: &Tensor<T>, gamma: &[T], beta: &[T], mean: &[f64], var: &[f64], eps: f64) -> Result<Tensor<T>> {
    let s = x.shape();
    let mut out = x.clone();
    out.zero_grad();
    let plane = s.plane();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let c = i % s.c;
        let inv = 1.0 / (var[c] + eps).sqrt();
        let (g, b) = (gamma[c].as_f64(), beta[c].as_f64());
        for v in chunk {
            *v = T::from_f64(g * (v.as_f64() - mean[c]) * inv + b);
        }
    }
    out.check_finite("batch_norm")?;
    Ok(out)
}

/// Training-mode batch norm: normalizes with batch statistics and returns
/// them so the caller can fold them into the running estimates.
pub fn batch_norm_train<T: Element>(x: &Tensor<T>, p: &BnParams<'_, T>) -> Result<(Tensor<T>, BatchStats)> {
    check_bn(x.shape(), p)?;
    let stats = batch_stats(x);
    let y = normalize(x, p.gamma, p.beta, &stats.mean, &stats.var, p.eps)?;
    Ok((y, stats))
}

/// Inference-mode batch norm using the running statistics.
pub fn batch_norm_infer<T: Element>(x: &Tensor<T>, p: &BnParams<'_, T>) -> Result<Tensor<T>> {
    check_bn(x.shape(), p)?;
    let mean: Vec<f64> = p.running_mean.iter().map(|v| v.as_f64()).collect();
    let var: Vec<f64> = p.running_var.iter().map(|v| v.as_f64()).collect();
    normalize(x, p.gamma, p.beta, &mean, &var, p.eps)
}

/// `run <- (1 - momentum) * run + momentum * batch`.
pub fn update_running<T: Element>(running: &mut [T], batch: &[f64], momentum: f64) {
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = T::from_f64((1.0 - momentum) * r.as_f64() + momentum * b);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn activation<T: Element>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let mut out = x.clone();
    out.zero_grad();
    match kind {
        Activation::Relu => out.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero())),
        Activation::Sigmoid => out
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::from_f64(sigmoid(v.as_f64()))),
    }
    out
}

/// Mean squared error over all elements.
pub fn mse<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same("mse", a.shape(), b.shape())?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    let v = sum / a.numel() as f64;
    if !v.is_finite() {
        return Err(TensorError::NonFinite { op: "mse" });
    }
    Ok(v)
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `targets` in {0, 1}.
pub fn bce_with_logits<T: Element>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<f64> {
    check_same("bce_with_logits", logits.shape(), targets.shape())?;
    let sum: f64 = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(z, t)| {
            let (z, t) = (z.as_f64(), t.as_f64());
            z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
        })
        .sum();
    Ok(sum / logits.numel() as f64)
}

pub(crate) fn check_same(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    for (dim, e, g) in [("batch", a.n, b.n), ("channel", a.c, b.c), ("height", a.h, b.h), ("width", a.w, b.w)] {
        if e != g {
            return Err(mismatch(op, dim, e, g));
        }
    }
    Ok(())
}
