//! Minimal manual-backprop trainer for the fixture CNN:
//! conv3×3(C→C1) → relu → conv3×3/2(C1→C2) → relu → flatten → dense.

#![allow(clippy::needless_range_loop)]

use hptq::ir::{pad_before, Padding};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{C, C1, C2, CLASSES, FLAT, H, K, W};

#[derive(Clone, Debug)]
pub struct Params {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl Params {
    fn init(rng: &mut ChaCha8Rng) -> Self {
        let mut he = |n: usize, fan_in: usize| {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            (0..n).map(|_| d.sample(rng)).collect::<Vec<f64>>()
        };
        Self {
            w1: he(K * K * C * C1, K * K * C),
            b1: vec![0.0; C1],
            w2: he(K * K * C1 * C2, K * K * C1),
            b2: vec![0.0; C2],
            w3: he(FLAT * CLASSES, FLAT),
            b3: vec![0.0; CLASSES],
        }
    }

    fn slices_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3]
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
            w3: vec![0.0; self.w3.len()],
            b3: vec![0.0; self.b3.len()],
        }
    }
}

struct Geom {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    top: usize,
    left: usize,
}

impl Geom {
    fn new(h: usize, w: usize, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            h,
            w,
            cin,
            cout,
            stride,
            oh: h.div_ceil(stride),
            ow: w.div_ceil(stride),
            top: pad_before(h, K, stride, Padding::Same),
            left: pad_before(w, K, stride, Padding::Same),
        }
    }

    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.left)?;
        (iy < self.h && ix < self.w).then_some(iy * self.w + ix)
    }
}

fn conv_fwd(g: &Geom, x: &[f64], wt: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.oh * g.ow * g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * g.cout..][..g.cout];
            o.copy_from_slice(b);
            for ky in 0..K {
                for kx in 0..K {
                    let Some(p) = g.src(oy, ox, ky, kx) else { continue };
                    for ci in 0..g.cin {
                        let v = x[p * g.cin + ci];
                        let wr = &wt[((ky * K + kx) * g.cin + ci) * g.cout..][..g.cout];
                        o.iter_mut().zip(wr).for_each(|(a, w)| *a += v * w);
                    }
                }
            }
        }
    }
    out
}

fn conv_bwd(g: &Geom, x: &[f64], wt: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64], mut dx: Option<&mut [f64]>) {
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let d = &dy[(oy * g.ow + ox) * g.cout..][..g.cout];
            db.iter_mut().zip(d).for_each(|(a, b)| *a += b);
            for ky in 0..K {
                for kx in 0..K {
                    let Some(p) = g.src(oy, ox, ky, kx) else { continue };
                    for ci in 0..g.cin {
                        let base = ((ky * K + kx) * g.cin + ci) * g.cout;
                        let v = x[p * g.cin + ci];
                        let mut acc = 0.0;
                        for k in 0..g.cout {
                            dw[base + k] += v * d[k];
                            acc += wt[base + k] * d[k];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[p * g.cin + ci] += acc;
                        }
                    }
                }
            }
        }
    }
}

fn geoms() -> (Geom, Geom) {
    (Geom::new(H, W, C, C1, 1), Geom::new(H, W, C1, C2, 2))
}

/// Logits of the trained network (reference for the exported graph).
pub fn forward(p: &Params, x: &[f64]) -> Vec<f64> {
    let (g1, g2) = geoms();
    let a1: Vec<f64> = conv_fwd(&g1, x, &p.w1, &p.b1).into_iter().map(|v| v.max(0.0)).collect();
    let a2: Vec<f64> = conv_fwd(&g2, &a1, &p.w2, &p.b2).into_iter().map(|v| v.max(0.0)).collect();
    let mut logits = p.b3.clone();
    for (i, &v) in a2.iter().enumerate() {
        for k in 0..CLASSES {
            logits[k] += v * p.w3[i * CLASSES + k];
        }
    }
    logits
}

/// Accumulates the cross-entropy gradient of one sample; returns its loss.
fn backprop(p: &Params, x: &[f64], label: usize, grad: &mut Params) -> f64 {
    let (g1, g2) = geoms();
    let z1 = conv_fwd(&g1, x, &p.w1, &p.b1);
    let a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
    let z2 = conv_fwd(&g2, &a1, &p.w2, &p.b2);
    let a2: Vec<f64> = z2.iter().map(|v| v.max(0.0)).collect();
    let mut logits = p.b3.clone();
    for (i, &v) in a2.iter().enumerate() {
        for k in 0..CLASSES {
            logits[k] += v * p.w3[i * CLASSES + k];
        }
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut dl: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let loss = -(dl[label].max(1e-300)).ln();
    dl[label] -= 1.0;

    let mut dz2 = vec![0.0; a2.len()];
    for (i, &v) in a2.iter().enumerate() {
        let mut acc = 0.0;
        for k in 0..CLASSES {
            grad.w3[i * CLASSES + k] += v * dl[k];
            acc += p.w3[i * CLASSES + k] * dl[k];
        }
        dz2[i] = if z2[i] > 0.0 { acc } else { 0.0 };
    }
    grad.b3.iter_mut().zip(&dl).for_each(|(a, b)| *a += b);
    let mut da1 = vec![0.0; a1.len()];
    conv_bwd(&g2, &a1, &p.w2, &dz2, &mut grad.w2, &mut grad.b2, Some(&mut da1));
    let dz1: Vec<f64> = da1.iter().zip(&z1).map(|(d, z)| if *z > 0.0 { *d } else { 0.0 }).collect();
    conv_bwd(&g1, x, &p.w1, &dz1, &mut grad.w1, &mut grad.b1, None);
    loss
}

/// Adam with a linearly decaying step, mini-batches of 32.
pub fn train(images: &[Vec<f64>], labels: &[u32], epochs: usize, rng: &mut ChaCha8Rng) -> Params {
    const BATCH: usize = 32;
    const LR: f64 = 3e-3;
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut p = Params::init(rng);
    let mut m = p.zeros_like();
    let mut v = p.zeros_like();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let total_steps = epochs * images.len().div_ceil(BATCH);
    let mut step: i32 = 0;
    for epoch in 0..epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut loss = 0.0;
        for batch in order.chunks(BATCH) {
            let mut g = p.zeros_like();
            for &i in batch {
                loss += backprop(&p, &images[i], labels[i] as usize, &mut g);
            }
            step += 1;
            let lr = LR * (1.0 - step as f64 / (total_steps + 1) as f64);
            let scale = 1.0 / batch.len() as f64;
            let (bc1, bc2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
            let gs = g.slices_mut();
            let ms = m.slices_mut();
            let vs = v.slices_mut();
            for (t, pv) in p.slices_mut().iter_mut().enumerate() {
                for j in 0..pv.len() {
                    let gj = gs[t][j] * scale;
                    ms[t][j] = b1 * ms[t][j] + (1.0 - b1) * gj;
                    vs[t][j] = b2 * vs[t][j] + (1.0 - b2) * gj * gj;
                    pv[j] -= lr * (ms[t][j] / bc1) / ((vs[t][j] / bc2).sqrt() + eps);
                }
            }
        }
        eprintln!("epoch {epoch:2}: loss {:.4}", loss / images.len() as f64);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Params::init(&mut rng);
        let x: Vec<f64> = (0..H * W * C).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = p.zeros_like();
        backprop(&p, &x, 3, &mut g);
        let loss = |p: &Params| {
            let mut scratch = p.zeros_like();
            backprop(p, &x, 3, &mut scratch)
        };
        for (which, idx) in [(0usize, 5usize), (2, 100), (4, 37), (1, 2), (3, 7)] {
            let mut plus = p.clone();
            let mut minus = p.clone();
            let h = 1e-6;
            plus.slices_mut()[which][idx] += h;
            minus.slices_mut()[which][idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = g.clone().slices_mut()[which][idx];
            assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()), "{which}/{idx}: {fd} vs {an}");
        }
    }
}
