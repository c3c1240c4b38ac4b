//! Uniform and symmetric quantizers.
//!
//! Rounding is half away from zero (`f64::round`) everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Exponent used for tensors or channels whose values are all zero.
pub const MIN_EXPONENT: i32 = -16;

/// Widest integer grid the simulator supports.
pub const MAX_BITS: u32 = 31;

/// General uniform quantizer over the clipping range `[a, b]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformSpec {
    a: f64,
    b: f64,
    bits: u32,
}

impl UniformSpec {
    pub fn new(a: f64, b: f64, bits: u32) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::InvalidSpec(format!("clip range [{a}, {b}] is empty")));
        }
        check_bits(bits)?;
        Ok(Self { a, b, bits })
    }

    pub fn step(&self) -> f64 {
        (self.b - self.a) / ((1u64 << self.bits) - 1) as f64
    }

    pub fn zero_point(&self) -> f64 {
        self.a / self.step()
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.a, self.b)
    }
}

pub fn uniform_quantize(x: f64, spec: &UniformSpec) -> f64 {
    let s = spec.step();
    s * ((x.clamp(spec.a, spec.b) - spec.a) / s).round() + spec.a
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=MAX_BITS).contains(&bits) {
        return Err(Error::InvalidSpec(format!(
            "bit-width {bits} outside 2..={MAX_BITS}"
        )));
    }
    Ok(())
}

/// Symmetric quantizer with zero-point 0 and threshold `2^exponent`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub signed: bool,
    pub exponent: i32,
}

impl QuantSpec {
    pub fn new(bits: u32, signed: bool, exponent: i32) -> Result<Self> {
        check_bits(bits)?;
        // keep the step a normal f64
        if !(-900..=900).contains(&exponent) {
            return Err(Error::InvalidSpec(format!("exponent {exponent} out of range")));
        }
        Ok(Self {
            bits,
            signed,
            exponent,
        })
    }

    pub fn signed(bits: u32, exponent: i32) -> Result<Self> {
        Self::new(bits, true, exponent)
    }

    pub fn unsigned(bits: u32, exponent: i32) -> Result<Self> {
        Self::new(bits, false, exponent)
    }

    pub fn threshold(&self) -> f64 {
        2f64.powi(self.exponent)
    }

    /// `2t / 2^bits` when signed, `t / 2^bits` when unsigned. Always a power of two.
    pub fn step(&self) -> f64 {
        let e = self.exponent - self.bits as i32 + i32::from(self.signed);
        2f64.powi(e)
    }

    /// Inclusive integer range of the grid.
    pub fn int_range(&self) -> (i64, i64) {
        if self.signed {
            let half = 1i64 << (self.bits - 1);
            (-half, half - 1)
        } else {
            (0, (1i64 << self.bits) - 1)
        }
    }

    pub fn quantize_int(&self, x: f64) -> i64 {
        let (lo, hi) = self.int_range();
        let r = (x / self.step()).round();
        // saturate before the cast so huge inputs cannot wrap
        r.clamp(lo as f64, hi as f64) as i64
    }

    pub fn dequantize(&self, q: i64) -> f64 {
        q as f64 * self.step()
    }

    pub fn quantize(&self, x: f64) -> f64 {
        self.dequantize(self.quantize_int(x))
    }

    /// Smallest and largest representable values.
    pub fn range(&self) -> (f64, f64) {
        let (lo, hi) = self.int_range();
        (self.dequantize(lo), self.dequantize(hi))
    }
}

/// Signed fake quantization of a tensor.
pub fn quantize_signed(x: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    if !spec.signed {
        return Err(Error::InvalidSpec("expected a signed quantizer".into()));
    }
    Ok(quantize_tensor(x, spec))
}

/// Unsigned fake quantization of a tensor.
pub fn quantize_unsigned(x: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    if spec.signed {
        return Err(Error::InvalidSpec("expected an unsigned quantizer".into()));
    }
    Ok(quantize_tensor(x, spec))
}

pub fn quantize_tensor(x: &Tensor, spec: &QuantSpec) -> Tensor {
    x.map(|v| spec.quantize(v))
}

/// Integer image of `x` under `spec`.
pub fn quantize_ints(x: &[f64], spec: &QuantSpec) -> Vec<i64> {
    x.iter().map(|&v| spec.quantize_int(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Layout;
    use proptest::prelude::*;

    fn scalar(x: f64) -> Tensor {
        Tensor::new(vec![1], vec![x], Layout::Activation).unwrap()
    }

    #[test]
    fn signed_examples() {
        let spec = QuantSpec::signed(8, 0).unwrap();
        assert_eq!(spec.step(), 1.0 / 128.0);
        assert_eq!(spec.quantize_int(0.5), 64);
        assert_eq!(quantize_signed(&scalar(0.5), &spec).unwrap().data(), &[0.5]);
        assert_eq!(quantize_signed(&scalar(1.5), &spec).unwrap().data(), &[0.9921875]);
        assert_eq!(spec.quantize(0.0), 0.0);
    }

    #[test]
    fn unsigned_examples() {
        let spec = QuantSpec::unsigned(8, 0).unwrap();
        assert_eq!(spec.step(), 1.0 / 256.0);
        assert_eq!(quantize_unsigned(&scalar(0.3), &spec).unwrap().data(), &[0.30078125]);
        assert_eq!(spec.quantize_int(0.3), 77);
        assert_eq!(spec.quantize(-0.1), 0.0);
        assert_eq!(spec.quantize(2.0), 255.0 / 256.0);
    }

    #[test]
    fn wrong_signedness_is_rejected() {
        let u = QuantSpec::unsigned(8, 0).unwrap();
        let s = QuantSpec::signed(8, 0).unwrap();
        assert!(quantize_signed(&scalar(1.0), &u).is_err());
        assert!(quantize_unsigned(&scalar(1.0), &s).is_err());
    }

    #[test]
    fn half_rounds_away_from_zero() {
        let spec = QuantSpec::signed(8, 7).unwrap(); // step 1
        assert_eq!(spec.quantize_int(2.5), 3);
        assert_eq!(spec.quantize_int(-2.5), -3);
    }

    #[test]
    fn negative_exponents_give_fractional_thresholds() {
        let spec = QuantSpec::signed(8, -1).unwrap();
        assert_eq!(spec.threshold(), 0.5);
        assert_eq!(spec.range(), (-0.5, 0.5 - 1.0 / 256.0));
    }

    #[test]
    fn invalid_specs() {
        assert!(QuantSpec::signed(1, 0).is_err());
        assert!(UniformSpec::new(1.0, 1.0, 8).is_err());
        assert!(UniformSpec::new(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn uniform_endpoints_are_fixed() {
        let spec = UniformSpec::new(-0.3, 4.2, 4).unwrap();
        assert_eq!(uniform_quantize(-0.3, &spec), -0.3);
        assert!((uniform_quantize(4.2, &spec) - 4.2).abs() < 1e-12);
        assert!((spec.zero_point() - (-0.3 / spec.step())).abs() < 1e-12);
    }

    #[test]
    fn uniform_midpoint_snaps_to_nearest_grid_point() {
        let (a, b) = (-1.0, 2.0);
        let spec = UniformSpec::new(a, b, 2).unwrap();
        let s = (b - a) / 3.0;
        let grid: Vec<f64> = (0..4).map(|k| a + k as f64 * s).collect();
        let x = (a + b) / 2.0;
        let nearest = grid
            .iter()
            .cloned()
            .min_by(|p, q| (p - x).abs().partial_cmp(&(q - x).abs()).unwrap())
            .unwrap();
        // x sits exactly between grid points 1 and 2; half-away rounding picks the upper one
        assert!((uniform_quantize(x, &spec) - grid[2]).abs() < 1e-12);
        assert!(((uniform_quantize(x, &spec) - x).abs() - (nearest - x).abs()).abs() < 1e-12);
    }

    fn spec_strategy() -> impl Strategy<Value = QuantSpec> {
        (2u32..=8, any::<bool>(), -8i32..8).prop_map(|(b, s, e)| QuantSpec::new(b, s, e).unwrap())
    }

    proptest! {
        #[test]
        fn idempotent(spec in spec_strategy(), x in -300.0f64..300.0) {
            let q = spec.quantize(x);
            prop_assert_eq!(spec.quantize(q), q);
        }

        #[test]
        fn outputs_lie_on_grid(spec in spec_strategy(), x in -300.0f64..300.0) {
            let q = spec.quantize(x);
            let k = q / spec.step();
            let (lo, hi) = spec.int_range();
            prop_assert_eq!(k, k.round());
            prop_assert!(k >= lo as f64 && k <= hi as f64);
        }

        #[test]
        fn monotone(spec in spec_strategy(), x in -300.0f64..300.0, y in -300.0f64..300.0) {
            let (x, y) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(spec.quantize(x) <= spec.quantize(y));
        }

        #[test]
        fn bounded_error_inside_clip_range(spec in spec_strategy(), u in 0.0f64..1.0) {
            let (lo, hi) = spec.range();
            let x = lo + u * (hi - lo);
            prop_assert!((spec.quantize(x) - x).abs() <= spec.step() / 2.0);
        }

        #[test]
        fn unsigned_step_is_half_the_signed_step(bits in 2u32..=16, e in -20i32..20) {
            let s = QuantSpec::signed(bits, e).unwrap();
            let u = QuantSpec::unsigned(bits, e).unwrap();
            prop_assert_eq!(u.step() * 2.0, s.step());
        }
    }
}
