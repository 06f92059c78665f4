//! Forward and backward kernels for every layer type the models use.
//!
//! Loops run in a fixed order (batch, output channel, input channel, kernel
//! row, kernel column, then spatial) so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor, Tensor4};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Output indices `lo..hi` along one axis whose input tap `o*stride + k - pad`
/// lands inside `0..in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if in_len + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub fn conv_output_shape(input: Shape, kernel: Shape, stride: usize, padding: usize) -> Result<Shape> {
    if input[1] != kernel[1] {
        return Err(Error::shape("conv2d", &[kernel[1]], &input[1..2]));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
    }
    let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
    if h < kernel[2] || w < kernel[3] {
        return Err(Error::shape("conv2d", &kernel, &input));
    }
    Ok([
        input[0],
        kernel[0],
        (h - kernel[2]) / stride + 1,
        (w - kernel[3]) / stride + 1,
    ])
}

/// Direct 2-D cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(input: &Tensor4<T>, kernel: &Tensor4<T>, stride: usize, padding: usize) -> Result<Tensor4<T>> {
    let [n_b, c_in, h, w] = input.shape();
    let [c_out, _, kh, kw] = kernel.shape();
    let out_shape = conv_output_shape(input.shape(), kernel.shape(), stride, padding)?;
    let [_, _, oh, ow] = out_shape;
    let mut out = Tensor4::<T>::zeros(out_shape);
    let x = input.data();
    let k = kernel.data();
    let y = out.data_mut();
    for n in 0..n_b {
        for o in 0..c_out {
            let out_plane = &mut y[(n * c_out + o) * oh * ow..][..oh * ow];
            for i in 0..c_in {
                let in_plane = &x[(n * c_in + i) * h * w..][..h * w];
                for p in 0..kh {
                    let (y_lo, y_hi) = valid_range(oh, h, p, stride, padding);
                    for q in 0..kw {
                        let wv = k[((o * c_in + i) * kh + p) * kw + q];
                        let (x_lo, x_hi) = valid_range(ow, w, q, stride, padding);
                        if x_lo >= x_hi {
                            continue;
                        }
                        for oy in y_lo..y_hi {
                            let iy = oy * stride + p - padding;
                            let row_out = &mut out_plane[oy * ow + x_lo..oy * ow + x_hi];
                            let in_row = &in_plane[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let start = x_lo + q - padding;
                                let src = &in_row[start..start + (x_hi - x_lo)];
                                for (d, &s) in row_out.iter_mut().zip(src) {
                                    *d = *d + wv * s;
                                }
                            } else {
                                for (j, d) in row_out.iter_mut().enumerate() {
                                    let ix = (x_lo + j) * stride + q - padding;
                                    *d = *d + wv * in_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input (optional) and kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> Result<(Option<Tensor4<T>>, Tensor4<T>)> {
    let [n_b, c_in, h, w] = input.shape();
    let [c_out, _, kh, kw] = kernel.shape();
    let out_shape = conv_output_shape(input.shape(), kernel.shape(), stride, padding)?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape("conv2d backward", &out_shape, &grad_out.shape()));
    }
    let [_, _, oh, ow] = out_shape;
    let mut dx = need_input_grad.then(|| Tensor4::<T>::zeros(input.shape()));
    let mut dk = Tensor4::<T>::zeros(kernel.shape());
    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    for n in 0..n_b {
        for o in 0..c_out {
            let g_plane = &g[(n * c_out + o) * oh * ow..][..oh * ow];
            for i in 0..c_in {
                let in_plane = &x[(n * c_in + i) * h * w..][..h * w];
                for p in 0..kh {
                    let (y_lo, y_hi) = valid_range(oh, h, p, stride, padding);
                    for q in 0..kw {
                        let (x_lo, x_hi) = valid_range(ow, w, q, stride, padding);
                        if x_lo >= x_hi {
                            continue;
                        }
                        let k_idx = ((o * c_in + i) * kh + p) * kw + q;
                        let wv = k[k_idx];
                        let mut acc = T::zero();
                        for oy in y_lo..y_hi {
                            let iy = oy * stride + p - padding;
                            let g_row = &g_plane[oy * ow + x_lo..oy * ow + x_hi];
                            if stride == 1 {
                                let start = iy * w + x_lo + q - padding;
                                let src = &in_plane[start..start + (x_hi - x_lo)];
                                for (&gv, &s) in g_row.iter().zip(src) {
                                    acc = acc + gv * s;
                                }
                                if let Some(dx) = dx.as_mut() {
                                    let dst = &mut dx.data_mut()[(n * c_in + i) * h * w + start..][..x_hi - x_lo];
                                    for (d, &gv) in dst.iter_mut().zip(g_row) {
                                        *d = *d + wv * gv;
                                    }
                                }
                            } else {
                                for (j, &gv) in g_row.iter().enumerate() {
                                    let ix = (x_lo + j) * stride + q - padding;
                                    acc = acc + gv * in_plane[iy * w + ix];
                                }
                                if let Some(dx) = dx.as_mut() {
                                    let plane = &mut dx.data_mut()[(n * c_in + i) * h * w..][..h * w];
                                    for (j, &gv) in g_row.iter().enumerate() {
                                        let ix = (x_lo + j) * stride + q - padding;
                                        plane[iy * w + ix] = plane[iy * w + ix] + wv * gv;
                                    }
                                }
                            }
                        }
                        let dk_data = dk.data_mut();
                        dk_data[k_idx] = dk_data[k_idx] + acc;
                    }
                }
            }
        }
    }
    Ok((dx, dk))
}

fn check_channel_vector(op: &'static str, x: Shape, v: &Tensor) -> Result<()> {
    if v.shape() != [1, x[1], 1, 1] {
        return Err(Error::shape(op, &[1, x[1], 1, 1], &v.shape()));
    }
    Ok(())
}

/// `y[n,c,h,w] = x[n,c,h,w] * scale[c]`
pub fn channel_scale(x: &Tensor, scale: &Tensor) -> Result<Tensor> {
    check_channel_vector("channel_scale", x.shape(), scale)?;
    let [_, c, h, w] = x.shape();
    let hw = h * w;
    let s = scale.data();
    let mut out = x.clone();
    for (idx, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
        let k = s[idx % c];
        chunk.iter_mut().for_each(|v| *v *= k);
    }
    Ok(out)
}

/// Returns (dx, dscale).
pub fn channel_scale_backward(x: &Tensor, scale: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let [_, c, h, w] = x.shape();
    let hw = h * w;
    let s = scale.data();
    let mut dx = grad.clone();
    let mut ds = vec![0.0; c];
    for (idx, (dchunk, xchunk)) in dx.data_mut().chunks_mut(hw).zip(x.data().chunks(hw)).enumerate() {
        let ch = idx % c;
        let mut acc = 0.0;
        for (d, &xv) in dchunk.iter_mut().zip(xchunk) {
            acc += *d * xv;
            *d *= s[ch];
        }
        ds[ch] += acc;
    }
    (dx, Tensor::channel_vector(&ds))
}

/// `y[n,c,h,w] = x[n,c,h,w] + bias[c]`
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    check_channel_vector("add_channel_bias", x.shape(), bias)?;
    let [_, c, h, w] = x.shape();
    let b = bias.data();
    let mut out = x.clone();
    for (idx, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
        let k = b[idx % c];
        chunk.iter_mut().for_each(|v| *v += k);
    }
    Ok(out)
}

pub fn channel_sums(grad: &Tensor) -> Tensor {
    let [_, c, h, w] = grad.shape();
    let mut acc = vec![0.0; c];
    for (idx, chunk) in grad.data().chunks(h * w).enumerate() {
        acc[idx % c] += chunk.iter().sum::<f64>();
    }
    Tensor::channel_vector(&acc)
}

/// Affine + running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Saved values for the batch-norm backward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    pub training: bool,
}

/// Batch norm. In training mode normalizes with batch statistics (population
/// variance) and updates the running statistics with the unbiased variance.
pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &mut BnState,
    training: bool,
) -> Result<(Tensor, BnCache)> {
    check_channel_vector("batchnorm gamma", x.shape(), gamma)?;
    check_channel_vector("batchnorm beta", x.shape(), beta)?;
    let [n, c, h, w] = x.shape();
    if state.channels() != c {
        return Err(Error::shape("batchnorm state", &[c], &[state.channels()]));
    }
    let hw = h * w;
    let (mean, var) = if training {
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "batchnorm in training mode needs a batch of at least 2, got {n}"
            )));
        }
        let m = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        for (idx, chunk) in x.data().chunks(hw).enumerate() {
            mean[idx % c] += chunk.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![0.0; c];
        for (idx, chunk) in x.data().chunks(hw).enumerate() {
            let mu = mean[idx % c];
            var[idx % c] += chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= m);
        for ch in 0..c {
            let unbiased = var[ch] * m / (m - 1.0);
            state.running_mean[ch] = (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mean[ch];
            state.running_var[ch] = (1.0 - state.momentum) * state.running_var[ch] + state.momentum * unbiased;
        }
        (mean, var)
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let g = gamma.data();
    let b = beta.data();
    let mut x_hat = x.clone();
    let mut y = x.clone();
    for (idx, (xh, yc)) in x_hat.data_mut().chunks_mut(hw).zip(y.data_mut().chunks_mut(hw)).enumerate() {
        let ch = idx % c;
        for (a, o) in xh.iter_mut().zip(yc.iter_mut()) {
            *a = (*a - mean[ch]) * inv_std[ch];
            *o = g[ch] * *a + b[ch];
        }
    }
    Ok((y, BnCache { x_hat, inv_std, training }))
}

/// Returns (dx, dgamma, dbeta).
pub fn batchnorm_backward(grad: &Tensor, gamma: &Tensor, cache: &BnCache) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = grad.shape();
    let hw = h * w;
    let g = gamma.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (idx, (gc, xc)) in grad.data().chunks(hw).zip(cache.x_hat.data().chunks(hw)).enumerate() {
        let ch = idx % c;
        for (&gv, &xv) in gc.iter().zip(xc) {
            dbeta[ch] += gv;
            dgamma[ch] += gv * xv;
        }
    }
    let mut dx = grad.clone();
    if cache.training {
        let m = (n * hw) as f64;
        for (idx, (dc, xc)) in dx.data_mut().chunks_mut(hw).zip(cache.x_hat.data().chunks(hw)).enumerate() {
            let ch = idx % c;
            let k = g[ch] * cache.inv_std[ch] / m;
            for (d, &xv) in dc.iter_mut().zip(xc) {
                *d = k * (m * *d - dbeta[ch] - xv * dgamma[ch]);
            }
        }
    } else {
        for (idx, dc) in dx.data_mut().chunks_mut(hw).enumerate() {
            let ch = idx % c;
            let k = g[ch] * cache.inv_std[ch];
            dc.iter_mut().for_each(|d| *d *= k);
        }
    }
    (dx, Tensor::channel_vector(&dgamma), Tensor::channel_vector(&dbeta))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(x: &Tensor, grad: &Tensor) -> Tensor {
    let mut dx = grad.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let hw = (h * w) as f64;
    let data = x.data().chunks(h * w).map(|ch| ch.iter().sum::<f64>() / hw).collect();
    Tensor::from_raw([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward(input_shape: Shape, grad: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape;
    let hw = h * w;
    let mut dx = Tensor::zeros([n, c, h, w]);
    for (chunk, &g) in dx.data_mut().chunks_mut(hw).zip(grad.data()) {
        let v = g / hw as f64;
        chunk.iter_mut().for_each(|d| *d = v);
    }
    dx
}

/// Fully connected layer. `x` is (N, C, H, W) flattened to F = C·H·W,
/// `weight` is (O, F, 1, 1), `bias` is (1, O, 1, 1). Output is (N, O, 1, 1).
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    let f = c * h * w;
    let [o, wf, _, _] = weight.shape();
    if wf != f || weight.len() != o * f {
        return Err(Error::shape("linear", &[o, f, 1, 1], &weight.shape()));
    }
    if bias.shape() != [1, o, 1, 1] {
        return Err(Error::shape("linear bias", &[1, o, 1, 1], &bias.shape()));
    }
    let mut out = Vec::with_capacity(n * o);
    for xs in x.data().chunks(f) {
        for (row, &b) in weight.data().chunks(f).zip(bias.data()) {
            out.push(row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() + b);
        }
    }
    Ok(Tensor::from_raw([n, o, 1, 1], out))
}

/// Returns (dx, dweight, dbias).
pub fn linear_backward(x: &Tensor, weight: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = x.shape();
    let f = c * h * w;
    let o = weight.shape()[0];
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = vec![0.0; o];
    for s in 0..n {
        let xs = &x.data()[s * f..(s + 1) * f];
        let gs = &grad.data()[s * o..(s + 1) * o];
        for (j, &g) in gs.iter().enumerate() {
            db[j] += g;
            let row = &mut dw.data_mut()[j * f..(j + 1) * f];
            for (d, &xv) in row.iter_mut().zip(xs) {
                *d += g * xv;
            }
            let wrow = &weight.data()[j * f..(j + 1) * f];
            let dxs = &mut dx.data_mut()[s * f..(s + 1) * f];
            for (d, &wv) in dxs.iter_mut().zip(wrow) {
                *d += g * wv;
            }
        }
    }
    (dx, dw, Tensor::channel_vector(&db))
}

/// Row-wise softmax of (N, K, 1, 1) logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Mean cross entropy against label-smoothed targets
/// `q = (1 - eps)·onehot + eps/K`. Returns (loss, dloss/dlogits).
pub fn cross_entropy(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<(f64, Tensor)> {
    let [n, k, h, w] = logits.shape();
    if h != 1 || w != 1 {
        return Err(Error::shape("cross_entropy", &[n, k, 1, 1], &logits.shape()));
    }
    if labels.len() != n {
        return Err(Error::shape("cross_entropy labels", &[n], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = logits.clone();
    let mut loss = 0.0;
    let off = smoothing / k as f64;
    for (row, &label) in grad.data_mut().chunks_mut(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (j, v) in row.iter_mut().enumerate() {
            let q = off + if j == label { 1.0 - smoothing } else { 0.0 };
            let logp = *v - lse;
            if q > 0.0 {
                loss -= q * logp;
            }
            *v = (logp.exp() - q) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}
