//! fp32 layer kernels over NCHW batches, forward and backward.
//!
//! Summation order inside every kernel is fixed so results are bit-reproducible.

use crate::graph::ConvAttrs;

/// NCHW extents of one activation batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn per_sample(&self) -> usize {
        self.c * self.h * self.w
    }
}

pub fn conv_out_dims(x: Dims, a: &ConvAttrs) -> Dims {
    let k = a.kernel_size;
    Dims::new(x.n, a.out_channels, (x.h + 2 * a.padding - k) / a.stride + 1, (x.w + 2 * a.padding - k) / a.stride + 1)
}

/// Output positions `o` in `[lo, hi)` with `o * stride + tap - pad` in `[0, extent)`.
#[inline]
pub(crate) fn valid_range(out: usize, extent: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > tap { (extent + pad - tap - 1) / stride + 1 } else { 0 };
    (lo.min(out), hi.min(out).max(lo.min(out)))
}

pub fn conv2d_forward(x: &[f32], xd: Dims, w: &[f32], bias: Option<&[f32]>, a: &ConvAttrs) -> (Vec<f32>, Dims) {
    let yd = conv_out_dims(xd, a);
    let k = a.kernel_size;
    let cin_g = xd.c / a.groups;
    let cout_g = a.out_channels / a.groups;
    let mut y = vec![0.0f32; yd.numel()];
    for n in 0..xd.n {
        for oc in 0..a.out_channels {
            let g = oc / cout_g;
            let y_off = (n * yd.c + oc) * yd.plane();
            let yp = &mut y[y_off..y_off + yd.plane()];
            if let Some(b) = bias {
                yp.iter_mut().for_each(|v| *v = b[oc]);
            }
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let xp = &x[(n * xd.c + ic) * xd.plane()..][..xd.plane()];
                for kh in 0..k {
                    let (oh_lo, oh_hi) = valid_range(yd.h, xd.h, a.stride, kh, a.padding);
                    for kw in 0..k {
                        let wv = w[((oc * cin_g + icg) * k + kh) * k + kw];
                        let (ow_lo, ow_hi) = valid_range(yd.w, xd.w, a.stride, kw, a.padding);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * a.stride + kh - a.padding;
                            let yrow = &mut yp[oh * yd.w..(oh + 1) * yd.w];
                            let xrow = &xp[ih * xd.w..(ih + 1) * xd.w];
                            for ow in ow_lo..ow_hi {
                                yrow[ow] += wv * xrow[ow * a.stride + kw - a.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    (y, yd)
}

/// Returns `(grad_x, grad_w, grad_bias)`; `grad_bias` is always computed.
pub fn conv2d_backward(
    x: &[f32],
    xd: Dims,
    w: &[f32],
    a: &ConvAttrs,
    gy: &[f32],
    need_gx: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let yd = conv_out_dims(xd, a);
    let k = a.kernel_size;
    let cin_g = xd.c / a.groups;
    let cout_g = a.out_channels / a.groups;
    let mut gx = if need_gx { vec![0.0f32; xd.numel()] } else { Vec::new() };
    let mut gw = vec![0.0f32; w.len()];
    let mut gb = vec![0.0f32; a.out_channels];
    for n in 0..xd.n {
        for oc in 0..a.out_channels {
            let g = oc / cout_g;
            let gyp = &gy[(n * yd.c + oc) * yd.plane()..][..yd.plane()];
            gb[oc] += gyp.iter().sum::<f32>();
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let x_off = (n * xd.c + ic) * xd.plane();
                for kh in 0..k {
                    let (oh_lo, oh_hi) = valid_range(yd.h, xd.h, a.stride, kh, a.padding);
                    for kw in 0..k {
                        let widx = ((oc * cin_g + icg) * k + kh) * k + kw;
                        let wv = w[widx];
                        let (ow_lo, ow_hi) = valid_range(yd.w, xd.w, a.stride, kw, a.padding);
                        let mut acc = 0.0f32;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * a.stride + kh - a.padding;
                            let xrow = x_off + ih * xd.w;
                            for ow in ow_lo..ow_hi {
                                let iw = ow * a.stride + kw - a.padding;
                                let gv = gyp[oh * yd.w + ow];
                                acc += gv * x[xrow + iw];
                                if need_gx {
                                    gx[xrow + iw] += wv * gv;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// `x` is `[n, in]`, `w` is `[out, in]`; returns `[n, out]`.
pub fn fc_forward(x: &[f32], n: usize, w: &[f32], bias: Option<&[f32]>, out: usize) -> Vec<f32> {
    let inf = w.len() / out;
    let mut y = vec![0.0f32; n * out];
    for s in 0..n {
        let xs = &x[s * inf..(s + 1) * inf];
        for o in 0..out {
            let wr = &w[o * inf..(o + 1) * inf];
            let dot: f32 = xs.iter().zip(wr).map(|(a, b)| a * b).sum();
            y[s * out + o] = dot + bias.map_or(0.0, |b| b[o]);
        }
    }
    y
}

pub fn fc_backward(
    x: &[f32],
    n: usize,
    w: &[f32],
    out: usize,
    gy: &[f32],
    need_gx: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let inf = w.len() / out;
    let mut gx = if need_gx { vec![0.0f32; n * inf] } else { Vec::new() };
    let mut gw = vec![0.0f32; w.len()];
    let mut gb = vec![0.0f32; out];
    for s in 0..n {
        let xs = &x[s * inf..(s + 1) * inf];
        for o in 0..out {
            let g = gy[s * out + o];
            gb[o] += g;
            let gwr = &mut gw[o * inf..(o + 1) * inf];
            for (gwi, xi) in gwr.iter_mut().zip(xs) {
                *gwi += g * xi;
            }
            if need_gx {
                let wr = &w[o * inf..(o + 1) * inf];
                let gxs = &mut gx[s * inf..(s + 1) * inf];
                for (gxi, wi) in gxs.iter_mut().zip(wr) {
                    *gxi += g * wi;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Running-statistics batch norm: `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn bn_inference(x: &[f32], d: Dims, gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f32) -> Vec<f32> {
    let mut y = vec![0.0f32; x.len()];
    let p = d.plane();
    for n in 0..d.n {
        for c in 0..d.c {
            let inv = 1.0 / (var[c] + eps).sqrt();
            let off = (n * d.c + c) * p;
            for i in off..off + p {
                y[i] = gamma[c] * (x[i] - mean[c]) * inv + beta[c];
            }
        }
    }
    y
}

/// Per-channel batch mean and biased variance.
pub fn channel_stats(x: &[f32], d: Dims) -> (Vec<f32>, Vec<f32>) {
    let p = d.plane();
    let count = (d.n * p) as f32;
    let mut mean = vec![0.0f32; d.c];
    let mut var = vec![0.0f32; d.c];
    for c in 0..d.c {
        let mut s = 0.0f32;
        for n in 0..d.n {
            s += x[(n * d.c + c) * p..][..p].iter().sum::<f32>();
        }
        mean[c] = s / count;
        let mut v = 0.0f32;
        for n in 0..d.n {
            v += x[(n * d.c + c) * p..][..p].iter().map(|&e| (e - mean[c]) * (e - mean[c])).sum::<f32>();
        }
        var[c] = v / count;
    }
    (mean, var)
}

/// Backward through batch-statistics BN. Returns `(gx, ggamma, gbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn bn_training_backward(
    x: &[f32],
    d: Dims,
    gamma: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
    gy: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let p = d.plane();
    let count = (d.n * p) as f32;
    let mut gx = vec![0.0f32; x.len()];
    let mut gg = vec![0.0f32; d.c];
    let mut gbeta = vec![0.0f32; d.c];
    for c in 0..d.c {
        let inv = 1.0 / (var[c] + eps).sqrt();
        let mut sum_g = 0.0f32;
        let mut sum_gx = 0.0f32;
        for n in 0..d.n {
            let off = (n * d.c + c) * p;
            for i in off..off + p {
                let xhat = (x[i] - mean[c]) * inv;
                sum_g += gy[i];
                sum_gx += gy[i] * xhat;
            }
        }
        gg[c] = sum_gx;
        gbeta[c] = sum_g;
        for n in 0..d.n {
            let off = (n * d.c + c) * p;
            for i in off..off + p {
                let xhat = (x[i] - mean[c]) * inv;
                gx[i] = gamma[c] * inv * (gy[i] - sum_g / count - xhat * sum_gx / count);
            }
        }
    }
    (gx, gg, gbeta)
}

/// Backward through running-statistics BN. Returns `(gx, ggamma, gbeta)`.
pub fn bn_inference_backward(
    x: &[f32],
    d: Dims,
    gamma: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
    gy: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let p = d.plane();
    let mut gx = vec![0.0f32; x.len()];
    let mut gg = vec![0.0f32; d.c];
    let mut gbeta = vec![0.0f32; d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let inv = 1.0 / (var[c] + eps).sqrt();
            let off = (n * d.c + c) * p;
            for i in off..off + p {
                gx[i] = gy[i] * gamma[c] * inv;
                gg[c] += gy[i] * (x[i] - mean[c]) * inv;
                gbeta[c] += gy[i];
            }
        }
    }
    (gx, gg, gbeta)
}

pub fn relu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_backward(x: &[f32], gy: &[f32]) -> Vec<f32> {
    x.iter().zip(gy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}

pub fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn avg_pool(x: &[f32], d: Dims, k: usize) -> (Vec<f32>, Dims) {
    let od = Dims::new(d.n, d.c, d.h / k, d.w / k);
    let scale = 1.0 / (k * k) as f32;
    let mut y = vec![0.0f32; od.numel()];
    for nc in 0..d.n * d.c {
        let xp = &x[nc * d.plane()..][..d.plane()];
        for oh in 0..od.h {
            for ow in 0..od.w {
                let mut s = 0.0f32;
                for i in 0..k {
                    for j in 0..k {
                        s += xp[(oh * k + i) * d.w + ow * k + j];
                    }
                }
                y[nc * od.plane() + oh * od.w + ow] = s * scale;
            }
        }
    }
    (y, od)
}

pub fn avg_pool_backward(d: Dims, k: usize, gy: &[f32]) -> Vec<f32> {
    let od = Dims::new(d.n, d.c, d.h / k, d.w / k);
    let scale = 1.0 / (k * k) as f32;
    let mut gx = vec![0.0f32; d.numel()];
    for nc in 0..d.n * d.c {
        for ih in 0..d.h {
            for iw in 0..d.w {
                gx[nc * d.plane() + ih * d.w + iw] = gy[nc * od.plane() + (ih / k) * od.w + iw / k] * scale;
            }
        }
    }
    gx
}

/// Max pool; also returns the flat input index chosen for every output (first max wins).
pub fn max_pool(x: &[f32], d: Dims, k: usize) -> (Vec<f32>, Dims, Vec<usize>) {
    let od = Dims::new(d.n, d.c, d.h / k, d.w / k);
    let mut y = vec![0.0f32; od.numel()];
    let mut arg = vec![0usize; od.numel()];
    for nc in 0..d.n * d.c {
        for oh in 0..od.h {
            for ow in 0..od.w {
                let mut best = f32::NEG_INFINITY;
                let mut bi = 0;
                for i in 0..k {
                    for j in 0..k {
                        let idx = nc * d.plane() + (oh * k + i) * d.w + ow * k + j;
                        if x[idx] > best || (i == 0 && j == 0) {
                            best = x[idx];
                            bi = idx;
                        }
                    }
                }
                let o = nc * od.plane() + oh * od.w + ow;
                y[o] = best;
                arg[o] = bi;
            }
        }
    }
    (y, od, arg)
}

pub fn max_pool_backward(numel: usize, arg: &[usize], gy: &[f32]) -> Vec<f32> {
    let mut gx = vec![0.0f32; numel];
    for (o, &i) in arg.iter().enumerate() {
        gx[i] += gy[o];
    }
    gx
}

/// Row-wise softmax over `[n, k]`.
pub fn softmax(x: &[f32], n: usize, k: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; n * k];
    for s in 0..n {
        let row = &x[s * k..(s + 1) * k];
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f32;
        for (o, &v) in y[s * k..(s + 1) * k].iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        y[s * k..(s + 1) * k].iter_mut().for_each(|v| *v /= z);
    }
    y
}

pub fn softmax_backward(y: &[f32], n: usize, k: usize, gy: &[f32]) -> Vec<f32> {
    let mut gx = vec![0.0f32; n * k];
    for s in 0..n {
        let ys = &y[s * k..(s + 1) * k];
        let gs = &gy[s * k..(s + 1) * k];
        let dot: f32 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
        for i in 0..k {
            gx[s * k + i] = ys[i] * (gs[i] - dot);
        }
    }
    gx
}

/// Mean softmax cross-entropy over `[n, k]` logits and the gradient wrt logits.
pub fn softmax_cross_entropy(logits: &[f32], n: usize, k: usize, labels: &[usize]) -> (f32, Vec<f32>) {
    let probs = softmax(logits, n, k);
    let mut loss = 0.0f64;
    let mut grad = probs.clone();
    for s in 0..n {
        let p = probs[s * k + labels[s]].max(f32::MIN_POSITIVE);
        loss -= (p as f64).ln();
        grad[s * k + labels[s]] -= 1.0;
    }
    grad.iter_mut().for_each(|g| *g /= n as f32);
    ((loss / n as f64) as f32, grad)
}
