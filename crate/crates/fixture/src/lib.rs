//! Synthetic 10-class image data and a small CNN trained on it.
//!
//! The trained network is then made deliberately hard to quantize without
//! changing its float function: channel ranges are spread over several
//! octaves and every convolution is re-expressed as conv + batch norm.

mod train;

pub use train::{forward, train, Params};

use hptq::ir::{Activation, ActivationKind, BatchNorm, Conv2d, Dense, GraphInput, Node, Op, Padding};
use hptq::{CalibrationSet, Graph, Layout, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub const H: usize = 8;
pub const W: usize = 8;
pub const C: usize = 3;
pub const CLASSES: usize = 10;
pub const C1: usize = 8;
pub const C2: usize = 16;
pub const K: usize = 3;
pub const PIXELS: usize = H * W * C;
pub const FLAT: usize = 4 * 4 * C2;

/// Class templates plus the noise model.
pub struct Generator {
    prototypes: Vec<Vec<f64>>,
    pub noise: f64,
    pub hot_pixel_rate: f64,
}

impl Generator {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let prototypes = (0..CLASSES)
            .map(|_| {
                let mut img = vec![0.0; PIXELS];
                for _ in 0..3 {
                    let cy = rng.random_range(0.5..7.5);
                    let cx = rng.random_range(0.5..7.5);
                    let sigma: f64 = rng.random_range(0.8..1.8);
                    let color: Vec<f64> = (0..C).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
                    for y in 0..H {
                        for x in 0..W {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            let g = (-d2 / (2.0 * sigma * sigma)).exp();
                            for c in 0..C {
                                img[(y * W + x) * C + c] += color[c] * g;
                            }
                        }
                    }
                }
                img
            })
            .collect();
        Self {
            prototypes,
            noise: 0.6,
            hot_pixel_rate: 0.03,
        }
    }

    /// One shifted, rescaled, noisy copy of a class template. A small
    /// fraction of samples carry a single saturated "hot pixel".
    pub fn sample(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let proto = &self.prototypes[class];
        let dy = rng.random_range(-1i32..=1) as isize;
        let dx = rng.random_range(-1i32..=1) as isize;
        let amp = rng.random_range(0.8..1.2);
        let noise = Normal::new(0.0, self.noise).unwrap();
        let mut img = vec![0.0; PIXELS];
        for y in 0..H {
            for x in 0..W {
                let (sy, sx) = (y as isize - dy, x as isize - dx);
                let inside = (0..H as isize).contains(&sy) && (0..W as isize).contains(&sx);
                for c in 0..C {
                    let base = if inside {
                        proto[(sy as usize * W + sx as usize) * C + c]
                    } else {
                        0.0
                    };
                    img[(y * W + x) * C + c] = amp * base + noise.sample(rng);
                }
            }
        }
        if rng.random_bool(self.hot_pixel_rate) {
            let i = rng.random_range(0..PIXELS);
            let v = rng.random_range(20.0..40.0);
            img[i] = if rng.random_bool(0.5) { v } else { -v };
        }
        img
    }

    /// `n` samples with balanced, shuffled labels.
    pub fn dataset(&self, n: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<u32>) {
        let mut labels: Vec<u32> = (0..n).map(|i| (i % CLASSES) as u32).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            labels.swap(i, j);
        }
        let images = labels.iter().map(|&l| self.sample(l as usize, rng)).collect();
        (images, labels)
    }
}

pub fn to_set(images: &[Vec<f64>], labels: Option<&[u32]>) -> CalibrationSet {
    let samples = images
        .iter()
        .map(|x| Tensor::new(vec![H, W, C], x.clone(), Layout::Activation).unwrap())
        .collect();
    let mut set = CalibrationSet::new(samples);
    set.labels = labels.map(<[u32]>::to_vec);
    set.preprocessing = Some(serde_json::json!({
        "source": "synthetic",
        "normalization": "none",
        "shape": [H, W, C],
    }));
    set
}


/// Per-channel scale factors spread log-uniformly over `[2^lo, 2^hi]`.
fn octave_scales(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| 2f64.powf(rng.random_range(lo..hi))).collect()
}

/// Conv followed by a batch norm that, together, equal the conv `(w, b)`.
fn unfold_bn(w: &mut [f64], b: &mut [f64], rng: &mut ChaCha8Rng) -> BatchNorm {
    const EPS: f64 = 1e-3;
    let c = b.len();
    let gamma: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    let beta: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.25..4.0)).collect();
    let f: Vec<f64> = (0..c).map(|k| (var[k] + EPS).sqrt() / gamma[k]).collect();
    for row in w.chunks_exact_mut(c) {
        row.iter_mut().zip(&f).for_each(|(v, f)| *v *= f);
    }
    for k in 0..c {
        b[k] = (b[k] - beta[k]) * f[k] + mean[k];
    }
    BatchNorm {
        gamma,
        beta,
        mean,
        var,
        epsilon: EPS,
    }
}

fn conv_op(w: Vec<f64>, b: Vec<f64>, cin: usize, cout: usize, stride: usize) -> Op {
    Op::Conv2d(Conv2d {
        weight: Tensor::new(vec![K, K, cin, cout], w, Layout::Weight).unwrap(),
        bias: b,
        stride: [stride, stride],
        padding: Padding::Same,
        pad_value: 0.0,
    })
}

fn dense_op(w: Vec<f64>, b: Vec<f64>, cin: usize, cout: usize) -> Op {
    Op::Dense(Dense {
        weight: Tensor::new(vec![cin, cout], w, Layout::Weight).unwrap(),
        bias: b,
    })
}

fn relu() -> Op {
    Op::Activation(Activation::new(ActivationKind::Relu))
}

fn input(shape: Vec<usize>) -> GraphInput {
    GraphInput {
        name: "input".into(),
        shape,
        quant: None,
    }
}

/// Chains nodes so each consumes the previous output.
fn chain(input: GraphInput, ops: Vec<(&str, Op)>) -> anyhow::Result<Graph> {
    let mut prev = input.name.clone();
    let mut nodes = Vec::new();
    for (i, (name, op)) in ops.into_iter().enumerate() {
        nodes.push(Node::new(i as u32, name, op, vec![prev]));
        prev = name.to_string();
    }
    Ok(Graph::new(input, vec![prev], nodes)?)
}

/// Exports trained parameters as conv-bn-relu ×2 → flatten → dense with the
/// same float function but badly balanced channel ranges.
pub fn build_graph(p: &Params, rng: &mut ChaCha8Rng) -> anyhow::Result<Graph> {
    let (mut w1, mut b1, mut w2, mut b2, mut w3) = (p.w1.clone(), p.b1.clone(), p.w2.clone(), p.b2.clone(), p.w3.clone());
    let r1 = octave_scales(C1, -6.0, 1.0, rng);
    let r2 = octave_scales(C2, -5.0, 1.0, rng);
    for row in w1.chunks_exact_mut(C1) {
        row.iter_mut().zip(&r1).for_each(|(v, r)| *v *= r);
    }
    b1.iter_mut().zip(&r1).for_each(|(v, r)| *v *= r);
    // conv2 rows are indexed by (tap, input channel)
    for (i, row) in w2.chunks_exact_mut(C2).enumerate() {
        let r = r1[i % C1];
        row.iter_mut().for_each(|v| *v /= r);
        row.iter_mut().zip(&r2).for_each(|(v, r)| *v *= r);
    }
    b2.iter_mut().zip(&r2).for_each(|(v, r)| *v *= r);
    for (i, row) in w3.chunks_exact_mut(CLASSES).enumerate() {
        let r = r2[i % C2];
        row.iter_mut().for_each(|v| *v /= r);
    }
    let bn1 = unfold_bn(&mut w1, &mut b1, rng);
    let bn2 = unfold_bn(&mut w2, &mut b2, rng);
    chain(
        input(vec![H, W, C]),
        vec![
            ("conv1", conv_op(w1, b1, C, C1, 1)),
            ("bn1", Op::BatchNorm(bn1)),
            ("relu1", relu()),
            ("conv2", conv_op(w2, b2, C1, C2, 2)),
            ("bn2", Op::BatchNorm(bn2)),
            ("relu2", relu()),
            ("flatten", Op::Flatten),
            ("fc", dense_op(w3, p.b3.clone(), FLAT, CLASSES)),
        ],
    )
}

/// A single dense layer on a length-`cin` input.
pub fn single_dense(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> anyhow::Result<Graph> {
    let w = (0..cin * cout).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b = (0..cout).map(|_| rng.random_range(-0.1..0.1)).collect();
    chain(input(vec![cin]), vec![("fc", dense_op(w, b, cin, cout))])
}

/// conv 3×3 → batch norm → relu on an `h×w×cin` input.
pub fn conv_bn_relu(h: usize, w: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> anyhow::Result<Graph> {
    let mut wt: Vec<f64> = (0..K * K * cin * cout).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut b: Vec<f64> = (0..cout).map(|_| rng.random_range(-0.1..0.1)).collect();
    let bn = unfold_bn(&mut wt, &mut b, rng);
    chain(
        input(vec![h, w, cin]),
        vec![
            ("conv", conv_op(wt, b, cin, cout, 1)),
            ("bn", Op::BatchNorm(bn)),
            ("relu", relu()),
        ],
    )
}

/// Fraction of samples whose arg-max logit matches the label.
pub fn accuracy(p: &Params, images: &[Vec<f64>], labels: &[u32]) -> f64 {
    let hits = images
        .iter()
        .zip(labels)
        .filter(|(x, &l)| argmax(&forward(p, x)) == l as usize)
        .count();
    hits as f64 / images.len() as f64
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}
