//! Threshold selection for power-of-two quantizers.
//!
//! Candidates are `t_nc / 2^i` for `i = 0..=n`, where `t_nc` is the smallest
//! power of two covering the data. Activations are scored on their histogram,
//! weights on the raw values.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::quantizers::{QuantSpec, MIN_EXPONENT};
use crate::stats::{Histogram, TensorStats, DEFAULT_BINS};
use crate::tensor::Tensor;

/// Smoothing added to both distributions before the KL divergence.
pub const KL_EPSILON: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorMeasure {
    /// No search: use the no-clipping threshold.
    Nc,
    #[default]
    Mse,
    Mae,
    Kl,
}

impl ErrorMeasure {
    pub const ALL: [ErrorMeasure; 4] = [ErrorMeasure::Nc, ErrorMeasure::Mse, ErrorMeasure::Mae, ErrorMeasure::Kl];

    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorMeasure::Nc => "nc",
            ErrorMeasure::Mse => "mse",
            ErrorMeasure::Mae => "mae",
            ErrorMeasure::Kl => "kl",
        }
    }
}

impl fmt::Display for ErrorMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown error measure `{s}` (expected nc, mse, mae or kl)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    /// Selected threshold is `2^exponent`.
    pub exponent: i32,
    /// Error at the selected threshold; `None` when no search ran.
    pub error: Option<f64>,
    pub nc_exponent: i32,
    /// Number of error evaluations.
    pub evaluations: usize,
}

impl ThresholdResult {
    fn fixed(exponent: i32) -> Self {
        Self {
            exponent,
            error: None,
            nc_exponent: exponent,
            evaluations: 0,
        }
    }

    pub fn threshold(&self) -> f64 {
        2f64.powi(self.exponent)
    }
}

/// `ceil(log2(max_abs))`, or [`MIN_EXPONENT`] for an all-zero input.
pub fn no_clipping_threshold(max_abs: f64) -> Result<i32> {
    if !max_abs.is_finite() || max_abs < 0.0 {
        return Err(Error::InvalidArgument(format!("max_abs must be finite and >= 0, got {max_abs}")));
    }
    if max_abs == 0.0 {
        return Ok(MIN_EXPONENT);
    }
    let mut m = max_abs.log2().ceil() as i32;
    // log2 can be off by one ulp near exact powers of two
    while 2f64.powi(m) < max_abs {
        m += 1;
    }
    while 2f64.powi(m - 1) >= max_abs {
        m -= 1;
    }
    Ok(m)
}

/// Evaluates `err` at exponents `m_nc, m_nc - 1, ..., m_nc - n` and keeps the
/// first strict minimum, so ties go to the larger threshold.
pub fn select_threshold(mut err: impl FnMut(i32) -> f64, m_nc: i32, n: u32) -> ThresholdResult {
    let mut best = m_nc;
    let mut e_min = f64::INFINITY;
    for i in 0..=n as i32 {
        let m = m_nc - i;
        let e = err(m);
        if e < e_min {
            e_min = e;
            best = m;
        }
    }
    ThresholdResult {
        exponent: best,
        error: Some(e_min),
        nc_exponent: m_nc,
        evaluations: n as usize + 1,
    }
}

#[inline]
fn pointwise(measure: ErrorMeasure, d: f64) -> f64 {
    match measure {
        ErrorMeasure::Mae => d.abs(),
        _ => d * d,
    }
}

/// Antiderivative of `f(x - level)` in x.
#[inline]
fn antiderivative(measure: ErrorMeasure, x: f64, level: f64) -> f64 {
    let u = x - level;
    match measure {
        ErrorMeasure::Mae => 0.5 * u * u.abs(),
        _ => u * u * u / 3.0,
    }
}

/// ∫ f(Q(x) − x) dx over [a, b].
fn integrate(spec: &QuantSpec, measure: ErrorMeasure, a: f64, b: f64) -> f64 {
    let s = spec.step();
    let (qmin, qmax) = spec.int_range();
    let (qmin, qmax) = (qmin as f64, qmax as f64);
    let piece = |p: f64, q: f64, level: f64| antiderivative(measure, q, level) - antiderivative(measure, p, level);
    let lo_edge = (qmin + 0.5) * s;
    let hi_edge = (qmax - 0.5) * s;
    let mut total = 0.0;
    // saturated tails
    if a < lo_edge {
        total += piece(a, b.min(lo_edge), qmin * s);
    }
    if b > hi_edge {
        total += piece(a.max(hi_edge), b, qmax * s);
    }
    let (p, q) = (a.max(lo_edge), b.min(hi_edge));
    if p < q {
        let k1 = (p / s + 0.5).floor().clamp(qmin, qmax);
        let k2 = (q / s + 0.5).floor().clamp(qmin, qmax);
        if k1 == k2 {
            total += piece(p, q, k1 * s);
        } else {
            total += piece(p, (k1 + 0.5) * s, k1 * s);
            total += piece((k2 - 0.5) * s, q, k2 * s);
            let full = k2 - k1 - 1.0;
            if full > 0.0 {
                let per = match measure {
                    ErrorMeasure::Mae => s * s / 4.0,
                    _ => s * s * s / 12.0,
                };
                total += full * per;
            }
        }
    }
    total
}

/// Whether some decision boundary of `spec` lies in `[lo, hi]`.
fn has_breakpoint(spec: &QuantSpec, lo: f64, hi: f64) -> bool {
    let s = spec.step();
    let (qmin, qmax) = spec.int_range();
    let k_lo = ((lo / s - 0.5).ceil()).max(qmin as f64);
    let k_hi = ((hi / s - 0.5).floor()).min((qmax - 1) as f64);
    k_lo <= k_hi
}

/// Summed error of one bin.
fn bin_error(h: &Histogram, i: usize, spec: &QuantSpec, measure: ErrorMeasure) -> f64 {
    let c = h.counts()[i];
    if c <= 0.0 {
        return 0.0;
    }
    let (lo, hi) = (h.edges()[i], h.edges()[i + 1]);
    let ctr = h.center(i);
    let s1 = h.sums()[i];
    let s2 = h.sq_sums()[i];
    let level = spec.quantize(ctr);
    let d = level - ctr;
    let constant_level = !has_breakpoint(spec, lo, hi);
    match measure {
        // Σ (q − x)² = c·d² − 2·d·Σ(x − ctr) + Σ(x − ctr)²
        ErrorMeasure::Mse if constant_level => (c * d * d - 2.0 * d * s1 + s2).max(0.0),
        // the sign of q − x is constant when q lies outside the bin
        ErrorMeasure::Mae if constant_level && !(lo < level && level < hi) => (c * d - s1).abs(),
        _ => {
            // moment-matched uniform density inside the bin
            let mean = s1 / c;
            let var = (s2 / c - mean * mean).max(0.0);
            let m = ctr + mean;
            let half = (3.0 * var).sqrt();
            if half <= f64::EPSILON * m.abs().max(hi - lo) {
                c * pointwise(measure, spec.quantize(m) - m)
            } else {
                c / (2.0 * half) * integrate(spec, measure, m - half, m + half)
            }
        }
    }
}

fn kl_divergence(h: &Histogram, spec: &QuantSpec) -> f64 {
    let total = h.total();
    let n = h.n_bins();
    let levels: Vec<i64> = (0..n).map(|i| spec.quantize_int(h.center(i))).collect();
    // mass and occupied-bin count per quantized level
    let mut groups: std::collections::BTreeMap<i64, (f64, usize)> = Default::default();
    for (&c, &level) in h.counts().iter().zip(&levels) {
        let g = groups.entry(level).or_default();
        g.0 += c;
        if c > 0.0 {
            g.1 += 1;
        }
    }
    let mut p: Vec<f64> = h.counts().iter().map(|c| c / total + KL_EPSILON).collect();
    let mut q: Vec<f64> = (0..n)
        .map(|i| {
            let c = h.counts()[i];
            let (mass, occupied) = groups[&levels[i]];
            let v = if c > 0.0 { mass / occupied as f64 / total } else { 0.0 };
            v + KL_EPSILON
        })
        .collect();
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    p.iter_mut().for_each(|v| *v /= sp);
    q.iter_mut().for_each(|v| *v /= sq);
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
}

fn histogram_error_unchecked(h: &Histogram, spec: &QuantSpec, measure: ErrorMeasure) -> f64 {
    match measure {
        ErrorMeasure::Kl => kl_divergence(h, spec),
        _ => (0..h.n_bins()).map(|i| bin_error(h, i, spec, measure)).sum::<f64>() / h.total(),
    }
}

/// Estimated quantization error of the data summarized by `h`.
///
/// MSE and MAE are exact for bins that no decision boundary crosses and use a
/// moment-matched uniform density otherwise. KL compares the bin distribution
/// with its regrouped-by-level counterpart.
pub fn histogram_error(h: &Histogram, spec: &QuantSpec, measure: ErrorMeasure) -> Result<f64> {
    if measure == ErrorMeasure::Nc {
        return Err(Error::InvalidArgument("nc has no error to evaluate".into()));
    }
    if !(h.total() > 0.0) {
        return Err(Error::EmptyInput);
    }
    Ok(histogram_error_unchecked(h, spec, measure))
}

/// Exact mean error of quantizing `values`.
pub fn exact_error(values: &[f64], spec: &QuantSpec, measure: ErrorMeasure) -> Result<f64> {
    match measure {
        ErrorMeasure::Nc => Err(Error::InvalidArgument("nc has no error to evaluate".into())),
        ErrorMeasure::Kl => histogram_error(&Histogram::from_values(values, DEFAULT_BINS)?, spec, measure),
        _ if values.is_empty() => Err(Error::EmptyInput),
        _ => Ok(values
            .iter()
            .map(|&x| pointwise(measure, spec.quantize(x) - x))
            .sum::<f64>()
            / values.len() as f64),
    }
}

/// Threshold for one activation tensor, searched on its (outlier-filtered)
/// histogram.
pub fn select_activation_threshold(
    stats: &TensorStats,
    bits: u32,
    signed: bool,
    measure: ErrorMeasure,
    n: u32,
) -> Result<ThresholdResult> {
    let max_abs = stats.search_max_abs();
    let m_nc = no_clipping_threshold(max_abs)?;
    QuantSpec::new(bits, signed, m_nc)?;
    let h = stats.search_histogram();
    if measure == ErrorMeasure::Nc || max_abs == 0.0 || !(h.total() > 0.0) {
        return Ok(ThresholdResult::fixed(m_nc));
    }
    Ok(select_threshold(
        |m| histogram_error_unchecked(h, &QuantSpec { bits, signed, exponent: m }, measure),
        m_nc,
        n,
    ))
}

fn select_for_values(values: &[f64], bits: u32, measure: ErrorMeasure, n: u32) -> Result<ThresholdResult> {
    let max_abs = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let m_nc = no_clipping_threshold(max_abs)?;
    QuantSpec::signed(bits, m_nc)?;
    if max_abs == 0.0 {
        return Ok(ThresholdResult {
            error: Some(0.0),
            ..ThresholdResult::fixed(MIN_EXPONENT)
        });
    }
    if measure == ErrorMeasure::Nc {
        return Ok(ThresholdResult::fixed(m_nc));
    }
    if measure == ErrorMeasure::Kl {
        let h = Histogram::from_values(values, DEFAULT_BINS)?;
        return Ok(select_threshold(
            |m| kl_divergence(&h, &QuantSpec { bits, signed: true, exponent: m }),
            m_nc,
            n,
        ));
    }
    Ok(select_threshold(
        |m| {
            let spec = QuantSpec { bits, signed: true, exponent: m };
            values.iter().map(|&x| pointwise(measure, spec.quantize(x) - x)).sum::<f64>() / values.len() as f64
        },
        m_nc,
        n,
    ))
}

/// Signed weight thresholds, one per output channel (last axis). With
/// `per_channel == false` a single search over the whole tensor is repeated
/// for every channel.
pub fn select_weight_thresholds(
    w: &Tensor,
    bits: u32,
    n: u32,
    measure: ErrorMeasure,
    per_channel: bool,
) -> Result<Vec<ThresholdResult>> {
    let c = w.channels()?;
    if !per_channel {
        let r = select_for_values(w.data(), bits, measure, n)?;
        return Ok(vec![r; c]);
    }
    let slices: Vec<Vec<f64>> = (0..c)
        .map(|k| w.data().iter().skip(k).step_by(c).copied().collect())
        .collect();
    par::map(&slices, |v| select_for_values(v, bits, measure, n))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Layout;
    use proptest::prelude::*;

    fn signed(bits: u32, m: i32) -> QuantSpec {
        QuantSpec::signed(bits, m).unwrap()
    }

    /// Exhaustive scan with larger-threshold tie-breaking.
    fn oracle(values: &[f64], bits: u32, n: u32) -> (i32, f64) {
        let max_abs = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let m_nc = (max_abs.log2()).ceil() as i32;
        let errs: Vec<(i32, f64)> = (0..=n as i32)
            .map(|i| {
                let s = signed(bits, m_nc - i);
                let e = values.iter().map(|x| (s.quantize(*x) - x).powi(2)).sum::<f64>() / values.len() as f64;
                (m_nc - i, e)
            })
            .collect();
        let min = errs.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
        *errs.iter().find(|e| e.1 == min).unwrap()
    }

    #[test]
    fn no_clipping_examples() {
        assert_eq!(no_clipping_threshold(4.2).unwrap(), 3);
        assert_eq!(no_clipping_threshold(1.0).unwrap(), 0);
        assert_eq!(no_clipping_threshold(0.3).unwrap(), -1);
        assert_eq!(no_clipping_threshold(0.5).unwrap(), -1);
        assert_eq!(no_clipping_threshold(0.0).unwrap(), MIN_EXPONENT);
        assert!(no_clipping_threshold(-1.0).is_err());
        for m in -40..40 {
            assert_eq!(no_clipping_threshold(2f64.powi(m)).unwrap(), m);
            assert_eq!(no_clipping_threshold(2f64.powi(m) * 1.0000001).unwrap(), m + 1);
        }
    }

    #[test]
    fn single_candidate_when_n_is_zero() {
        let r = select_threshold(|m| m as f64, 3, 0);
        assert_eq!((r.exponent, r.evaluations), (3, 1));
    }

    #[test]
    fn ties_go_to_larger_threshold() {
        let r = select_threshold(|_| 1.0, 2, 5);
        assert_eq!(r.exponent, 2);
    }

    #[test]
    fn half_selects_half() {
        let w = Tensor::new(vec![1, 1], vec![0.5], Layout::Weight).unwrap();
        let r = select_weight_thresholds(&w, 8, 4, ErrorMeasure::Mse, true).unwrap();
        assert_eq!(r[0].exponent, -1);
        // t_nc = 0.5 is the largest candidate; 0.5 itself clips to 127/256
        assert_eq!(r[0].error, Some((1.0f64 / 256.0).powi(2)));
        assert_eq!(oracle(&[0.5], 8, 4).0, -1);
        let w = Tensor::new(vec![2, 1], vec![0.5, -0.5], Layout::Weight).unwrap();
        assert_eq!(select_weight_thresholds(&w, 8, 10, ErrorMeasure::Mse, true).unwrap()[0].exponent, -1);
    }

    #[test]
    fn uniform_on_point_nine_keeps_one() {
        let values: Vec<f64> = (0..=1800).map(|i| -0.9 + i as f64 * 0.001).collect();
        assert_eq!(oracle(&values, 8, 10).0, 0);
        let r = select_for_values(&values, 8, ErrorMeasure::Mse, 10).unwrap();
        assert_eq!(r.exponent, 0);
        let h = Histogram::from_values(&values, DEFAULT_BINS).unwrap();
        let stats = TensorStats {
            histogram: h,
            outlier_filtered: None,
            per_channel_min: vec![-0.9],
            per_channel_max: vec![0.9],
            per_channel_mean: vec![0.0],
            tensor_min: -0.9,
            tensor_max: 0.9,
            tensor_max_abs: 0.9,
            count: values.len(),
        };
        let r = select_activation_threshold(&stats, 8, true, ErrorMeasure::Mse, 10).unwrap();
        assert_eq!(r.exponent, 0);
        let nc = select_activation_threshold(&stats, 8, true, ErrorMeasure::Nc, 10).unwrap();
        assert_eq!((nc.exponent, nc.evaluations, nc.error), (0, 0, None));
    }

    #[test]
    fn zero_channel_gets_minimum_exponent() {
        let w = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, -3.0], Layout::Weight).unwrap();
        let r = select_weight_thresholds(&w, 8, 10, ErrorMeasure::Mse, true).unwrap();
        assert_eq!((r[0].exponent, r[0].error), (MIN_EXPONENT, Some(0.0)));
        assert_eq!(r[1].nc_exponent, 2);
    }

    #[test]
    fn histogram_examples() {
        let h = Histogram::from_counts(vec![-0.5, 0.5], vec![10.0]).unwrap();
        for m in -3..3 {
            for measure in [ErrorMeasure::Mse, ErrorMeasure::Mae] {
                assert_eq!(histogram_error(&h, &signed(8, m), measure).unwrap(), 0.0);
            }
        }
        let h = Histogram::from_counts(vec![-1.0, 0.0, 1.0], vec![3.0, 3.0]).unwrap();
        assert_eq!(h.centers(), vec![-0.5, 0.5]);
        assert_eq!(histogram_error(&h, &signed(8, 0), ErrorMeasure::Mse).unwrap(), 0.0);
        let empty = Histogram::from_counts(vec![0.0, 1.0], vec![0.0]).unwrap();
        assert!(histogram_error(&empty, &signed(8, 0), ErrorMeasure::Mse).is_err());
    }

    #[test]
    fn kl_is_zero_when_every_bin_keeps_its_level() {
        let h = Histogram::from_counts(vec![-1.5, -0.5, 0.5, 1.5], vec![1.0, 4.0, 2.0]).unwrap();
        let e = histogram_error(&h, &signed(8, 2), ErrorMeasure::Kl).unwrap();
        assert!(e.abs() < 1e-12);
        let coarse = histogram_error(&h, &signed(2, 0), ErrorMeasure::Kl).unwrap();
        assert!(coarse >= 0.0);
    }

    #[test]
    fn clipping_error_grows_as_threshold_shrinks() {
        let h = Histogram::from_counts(vec![3.5, 4.5], vec![1.0]).unwrap();
        let errs: Vec<f64> = (-2..=3)
            .rev()
            .map(|m| histogram_error(&h, &signed(8, m), ErrorMeasure::Mse).unwrap())
            .collect();
        for w in errs.windows(2).skip(1) {
            assert!(w[1] > w[0], "{errs:?}");
        }
    }

    #[test]
    fn measure_parsing() {
        assert_eq!("MSE".parse::<ErrorMeasure>().unwrap(), ErrorMeasure::Mse);
        assert_eq!(ErrorMeasure::Kl.to_string(), "kl");
        assert!("l2".parse::<ErrorMeasure>().is_err());
    }

    #[test]
    fn integrate_matches_quadrature() {
        let spec = signed(3, 0);
        for (a, b) in [(-1.7, 1.3), (0.1, 0.2), (-0.05, 0.05), (0.9, 2.0)] {
            for measure in [ErrorMeasure::Mse, ErrorMeasure::Mae] {
                let n = 200_000;
                let dx = (b - a) / n as f64;
                let quad: f64 = (0..n)
                    .map(|i| {
                        let x = a + (i as f64 + 0.5) * dx;
                        pointwise(measure, spec.quantize(x) - x) * dx
                    })
                    .sum();
                let got = integrate(&spec, measure, a, b);
                assert!((got - quad).abs() < 1e-6, "{a} {b} {measure}: {got} vs {quad}");
            }
        }
    }

    proptest! {
        #[test]
        fn search_matches_exhaustive_scan(
            values in prop::collection::vec(-50.0f64..50.0, 1..64),
            bits in 2u32..=8,
            n in 0u32..12,
        ) {
            prop_assume!(values.iter().any(|v| *v != 0.0));
            let r = select_for_values(&values, bits, ErrorMeasure::Mse, n).unwrap();
            let (m, e) = oracle(&values, bits, n);
            prop_assert_eq!(r.exponent, m);
            prop_assert_eq!(r.error, Some(e));
            prop_assert!(r.exponent <= r.nc_exponent);
        }

        #[test]
        fn histogram_mse_tracks_raw_data(seed in any::<u64>(), m in -2i32..3) {
            let mut s = seed | 1;
            let values: Vec<f64> = (0..5000).map(|_| {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                let u = (s >> 11) as f64 / (1u64 << 53) as f64;
                (u - 0.3) * 3.0
            }).collect();
            let h = Histogram::from_values(&values, DEFAULT_BINS).unwrap();
            let spec = signed(8, m);
            let est = histogram_error(&h, &spec, ErrorMeasure::Mse).unwrap();
            let raw = exact_error(&values, &spec, ErrorMeasure::Mse).unwrap();
            prop_assert!((est - raw).abs() <= 1e-3 * raw, "{} vs {}", est, raw);
        }
    }
}
