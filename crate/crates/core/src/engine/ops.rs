//! Scalar reference kernels. Accumulation order is fixed: bias first, then
//! taps in row-major (ky, kx, cin) order.

use crate::ir::{pad_before, Activation, ActivationKind, BatchNorm, Conv2d, Pool};
use crate::tensor::{Layout, Tensor};

const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

struct Window {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    top: usize,
    left: usize,
}

impl Window {
    fn new(x: &[usize], k: [usize; 2], stride: [usize; 2], padding: crate::ir::Padding) -> Self {
        Self {
            h: x[0],
            w: x[1],
            kh: k[0],
            kw: k[1],
            sh: stride[0],
            sw: stride[1],
            top: pad_before(x[0], k[0], stride[0], padding),
            left: pad_before(x[1], k[1], stride[1], padding),
        }
    }

    /// Input coordinates of tap (ky, kx) for output (oy, ox), if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.sh + ky).checked_sub(self.top)?;
        let ix = (ox * self.sw + kx).checked_sub(self.left)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

fn out_dim(len: usize, k: usize, s: usize, padding: crate::ir::Padding) -> usize {
    match padding {
        crate::ir::Padding::Valid => (len - k) / s + 1,
        crate::ir::Padding::Same => len.div_ceil(s),
    }
}

pub fn conv2d(x: &Tensor, c: &Conv2d, weight: &Tensor) -> Tensor {
    let xd = x.dims();
    let wd = weight.dims();
    let (cin, cout) = (wd[2], wd[3]);
    let oh = out_dim(xd[0], wd[0], c.stride[0], c.padding);
    let ow = out_dim(xd[1], wd[1], c.stride[1], c.padding);
    let win = Window::new(xd, [wd[0], wd[1]], c.stride, c.padding);
    let (xs, ws) = (x.data(), weight.data());
    let mut out = Vec::with_capacity(oh * ow * cout);
    let mut acc = vec![0.0; cout];
    let pad_row = vec![c.pad_value; cin];
    for oy in 0..oh {
        for ox in 0..ow {
            acc.copy_from_slice(&c.bias);
            for ky in 0..win.kh {
                for kx in 0..win.kw {
                    let px = match win.source(oy, ox, ky, kx) {
                        Some((iy, ix)) => &xs[(iy * win.w + ix) * cin..][..cin],
                        None => &pad_row[..],
                    };
                    let wrow = &ws[(ky * win.kw + kx) * cin * cout..];
                    for (ci, &v) in px.iter().enumerate() {
                        let wr = &wrow[ci * cout..][..cout];
                        for (a, &wv) in acc.iter_mut().zip(wr) {
                            *a += v * wv;
                        }
                    }
                }
            }
            out.extend_from_slice(&acc);
        }
    }
    Tensor::new(vec![oh, ow, cout], out, Layout::Activation).expect("conv output dims")
}

pub fn depthwise_conv2d(x: &Tensor, c: &Conv2d, weight: &Tensor) -> Tensor {
    let xd = x.dims();
    let wd = weight.dims();
    let ch = wd[3];
    let oh = out_dim(xd[0], wd[0], c.stride[0], c.padding);
    let ow = out_dim(xd[1], wd[1], c.stride[1], c.padding);
    let win = Window::new(xd, [wd[0], wd[1]], c.stride, c.padding);
    let (xs, ws) = (x.data(), weight.data());
    let mut out = Vec::with_capacity(oh * ow * ch);
    let mut acc = vec![0.0; ch];
    for oy in 0..oh {
        for ox in 0..ow {
            acc.copy_from_slice(&c.bias);
            for ky in 0..win.kh {
                for kx in 0..win.kw {
                    let wr = &ws[(ky * win.kw + kx) * ch..][..ch];
                    match win.source(oy, ox, ky, kx) {
                        Some((iy, ix)) => {
                            let px = &xs[(iy * win.w + ix) * ch..][..ch];
                            for ((a, &v), &wv) in acc.iter_mut().zip(px).zip(wr) {
                                *a += v * wv;
                            }
                        }
                        None => {
                            for (a, &wv) in acc.iter_mut().zip(wr) {
                                *a += c.pad_value * wv;
                            }
                        }
                    }
                }
            }
            out.extend_from_slice(&acc);
        }
    }
    Tensor::new(vec![oh, ow, ch], out, Layout::Activation).expect("depthwise output dims")
}

/// Sum over output positions of every im2col patch element, laid out like the
/// kernel's leading axes (kh×kw×cin, or kh×kw×c for depthwise), together with
/// the number of output positions.
pub fn patch_sums(x: &Tensor, c: &Conv2d, depthwise: bool) -> (Vec<f64>, usize) {
    let xd = x.dims();
    let wd = c.weight.dims();
    let cin = if depthwise { wd[3] } else { wd[2] };
    let oh = out_dim(xd[0], wd[0], c.stride[0], c.padding);
    let ow = out_dim(xd[1], wd[1], c.stride[1], c.padding);
    let win = Window::new(xd, [wd[0], wd[1]], c.stride, c.padding);
    let xs = x.data();
    let mut sums = vec![0.0; win.kh * win.kw * cin];
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..win.kh {
                for kx in 0..win.kw {
                    let dst = &mut sums[(ky * win.kw + kx) * cin..][..cin];
                    match win.source(oy, ox, ky, kx) {
                        Some((iy, ix)) => {
                            let px = &xs[(iy * win.w + ix) * cin..][..cin];
                            dst.iter_mut().zip(px).for_each(|(d, &v)| *d += v);
                        }
                        None => dst.iter_mut().for_each(|d| *d += c.pad_value),
                    }
                }
            }
        }
    }
    (sums, oh * ow)
}

pub fn dense(x: &Tensor, weight: &Tensor, bias: &[f64]) -> Tensor {
    let cout = weight.dims()[1];
    let mut out = bias.to_vec();
    for (&v, row) in x.data().iter().zip(weight.data().chunks_exact(cout)) {
        for (o, &w) in out.iter_mut().zip(row) {
            *o += v * w;
        }
    }
    Tensor::vector(out)
}

pub fn batch_norm(x: &Tensor, bn: &BatchNorm) -> Tensor {
    let scale: Vec<f64> = bn
        .gamma
        .iter()
        .zip(&bn.var)
        .map(|(g, v)| g / (v + bn.epsilon).sqrt())
        .collect();
    let mut out = x.clone();
    let c = scale.len();
    for row in out.data_mut().chunks_exact_mut(c) {
        for k in 0..c {
            row[k] = (row[k] - bn.mean[k]) * scale[k] + bn.beta[k];
        }
    }
    out
}

#[inline]
fn per_channel(v: &[f64], k: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[k]
    }
}

pub fn activation(x: &Tensor, a: &Activation) -> Tensor {
    let c = *x.dims().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for (k, v) in row.iter_mut().enumerate() {
            *v = apply_activation(&a.kind, *v, k) + a.shift;
        }
    }
    out
}

pub fn apply_activation(kind: &ActivationKind, x: f64, channel: usize) -> f64 {
    match kind {
        ActivationKind::Relu => x.max(0.0),
        ActivationKind::Relu6 => x.clamp(0.0, 6.0),
        ActivationKind::ClippedRelu { clip } => x.clamp(0.0, per_channel(clip, channel)),
        ActivationKind::LeakyRelu { slope } => {
            if x >= 0.0 {
                x
            } else {
                slope * x
            }
        }
        ActivationKind::Prelu { slopes } => {
            if x >= 0.0 {
                x
            } else {
                per_channel(slopes, channel) * x
            }
        }
        ActivationKind::Swish => x / (1.0 + (-x).exp()),
        ActivationKind::Selu => {
            if x > 0.0 {
                SELU_LAMBDA * x
            } else {
                SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
            }
        }
        ActivationKind::Hswish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
        ActivationKind::Identity => x,
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    out.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
    out
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let mean = x
        .channel_reduce(crate::tensor::Reduce::Mean)
        .expect("activation tensors have channels");
    Tensor::vector(mean)
}

pub fn max_pool(x: &Tensor, p: &Pool) -> Tensor {
    let xd = x.dims();
    let c = xd[2];
    let oh = out_dim(xd[0], p.size[0], p.stride[0], p.padding);
    let ow = out_dim(xd[1], p.size[1], p.stride[1], p.padding);
    let win = Window::new(xd, p.size, p.stride, p.padding);
    let xs = x.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut acc = vec![0.0; c];
    for oy in 0..oh {
        for ox in 0..ow {
            acc.fill(f64::NEG_INFINITY);
            for ky in 0..win.kh {
                for kx in 0..win.kw {
                    if let Some((iy, ix)) = win.source(oy, ox, ky, kx) {
                        let px = &xs[(iy * win.w + ix) * c..][..c];
                        acc.iter_mut().zip(px).for_each(|(a, &v)| *a = a.max(v));
                    }
                }
            }
            out.extend_from_slice(&acc);
        }
    }
    Tensor::new(vec![oh, ow, c], out, Layout::Activation).expect("pool output dims")
}

pub fn flatten(x: &Tensor) -> Tensor {
    Tensor::vector(x.data().to_vec())
}

pub fn softmax(x: &Tensor) -> Tensor {
    let c = *x.dims().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}
