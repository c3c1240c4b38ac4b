//! Graph rewrites applied by the pipeline.

mod bias_correction;
mod bn_fold;
mod equalize;
mod snc;

pub use bias_correction::{bias_correction, BiasCorrectionRecord};
pub use bn_fold::fold_batch_norm;
pub use equalize::{equalize_activations, EqualizationEntry, EqualizationPlan};
pub use snc::{apply_snc, SncRecord};

use crate::tensor::Tensor;

/// Multiplies weight column `k` (last axis) by `f(k)`.
pub(crate) fn scale_output_channels(w: &mut Tensor, f: impl Fn(usize) -> f64) {
    let c = *w.dims().last().unwrap();
    for row in w.data_mut().chunks_exact_mut(c) {
        row.iter_mut().enumerate().for_each(|(k, v)| *v *= f(k));
    }
}

/// Σ over every axis but the last, per output channel.
pub(crate) fn column_sums(w: &Tensor) -> Vec<f64> {
    let c = *w.dims().last().unwrap();
    let mut out = vec![0.0; c];
    for row in w.data().chunks_exact(c) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

#[cfg(test)]
pub(crate) mod testutil {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::{Layout, Tensor};

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn random(rng: &mut ChaCha8Rng, dims: Vec<usize>, layout: Layout) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), layout).unwrap()
    }

    pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        assert_eq!(a.dims(), b.dims());
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}
