//! Two's-complement fixed-point formats and the primitive arithmetic every
//! convolution engine routes through.
//!
//! Raw words are carried as `i32`, widened intermediates (products and
//! accumulators) as `i64`. Saturation only happens at quantization and
//! requantization boundaries; inside the accumulator values wrap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Signed fixed-point format: `real = raw * 2^-frac_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FxpFormat {
    pub word_bits: u32,
    pub frac_bits: u32,
}

impl FxpFormat {
    pub const INT8: FxpFormat = FxpFormat {
        word_bits: 8,
        frac_bits: 5,
    };
    pub const INT16: FxpFormat = FxpFormat {
        word_bits: 16,
        frac_bits: 10,
    };

    pub fn new(word_bits: u32, frac_bits: u32) -> Result<Self> {
        if word_bits != 8 && word_bits != 16 {
            return Err(Error::InvalidFormat(format!(
                "word_bits must be 8 or 16, got {word_bits}"
            )));
        }
        if frac_bits >= word_bits {
            return Err(Error::InvalidFormat(format!(
                "frac_bits {frac_bits} must be below word_bits {word_bits}"
            )));
        }
        Ok(Self {
            word_bits,
            frac_bits,
        })
    }

    #[inline]
    pub fn min_raw(&self) -> i32 {
        -(1i32 << (self.word_bits - 1))
    }

    #[inline]
    pub fn max_raw(&self) -> i32 {
        (1i32 << (self.word_bits - 1)) - 1
    }

    #[inline]
    pub fn contains(&self, raw: i64) -> bool {
        raw >= self.min_raw() as i64 && raw <= self.max_raw() as i64
    }

    /// Raw encoding of 1.0, if representable.
    pub fn one(&self) -> Option<i32> {
        let one = 1i64 << self.frac_bits;
        self.contains(one).then_some(one as i32)
    }

    #[inline]
    pub fn saturate(&self, v: i64) -> (i32, bool) {
        let lo = self.min_raw() as i64;
        let hi = self.max_raw() as i64;
        if v < lo {
            (lo as i32, true)
        } else if v > hi {
            (hi as i32, true)
        } else {
            (v as i32, false)
        }
    }

    pub fn to_real(&self, raw: i32) -> f64 {
        raw as f64 / (1u64 << self.frac_bits) as f64
    }
}

/// Widths of the words a fault can corrupt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatapathSpec {
    pub mul_out_bits: u32,
    pub acc_bits: u32,
    pub wrap_on_overflow: bool,
}

impl DatapathSpec {
    pub fn for_format(format: FxpFormat) -> Self {
        Self {
            mul_out_bits: 2 * format.word_bits,
            acc_bits: 32,
            wrap_on_overflow: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mul_out_bits > self.acc_bits {
            return Err(Error::InvalidFormat(format!(
                "mul_out_bits {} exceeds acc_bits {}",
                self.mul_out_bits, self.acc_bits
            )));
        }
        if self.acc_bits > 60 {
            return Err(Error::InvalidFormat(format!(
                "acc_bits {} exceeds the 60-bit simulation limit",
                self.acc_bits
            )));
        }
        Ok(())
    }
}

/// Sign-extends the low `bits` bits of `v`.
#[inline(always)]
pub fn wrap_to(v: i64, bits: u32) -> i64 {
    let shift = 64 - bits;
    (v << shift) >> shift
}

#[inline(always)]
fn saturate_to(v: i64, bits: u32) -> (i64, bool) {
    let hi = (1i64 << (bits - 1)) - 1;
    let lo = -(1i64 << (bits - 1));
    if v > hi {
        (hi, true)
    } else if v < lo {
        (lo, true)
    } else {
        (v, false)
    }
}

/// A quantized tensor plus the number of elements that had to be clipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub tensor: FxpTensor,
    pub saturated: u64,
}

/// Row-major fixed-point tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FxpTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
    format: FxpFormat,
}

impl FxpTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i32>, format: FxpFormat) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| !format.contains(v as i64)) {
            return Err(Error::InvalidFormat(format!(
                "raw value {bad} outside {}-bit range",
                format.word_bits
            )));
        }
        Ok(Self {
            shape,
            data,
            format,
        })
    }

    pub fn zeros(shape: Vec<usize>, format: FxpFormat) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0; n],
            format,
        }
    }

    /// Caller guarantees the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<i32>, format: FxpFormat) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            format,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn format(&self) -> FxpFormat {
        self.format
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub(crate) fn data_mut(&mut self) -> &mut [i32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<i32> {
        self.data
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.data.iter().map(|&r| self.format.to_real(r)).collect()
    }
}

/// Round-to-nearest-even of `value * 2^frac_bits`, saturated.
pub fn quantize_value(value: f64, format: FxpFormat) -> (i32, bool) {
    let scaled = (value * (1u64 << format.frac_bits) as f64).round_ties_even();
    let lo = format.min_raw() as f64;
    let hi = format.max_raw() as f64;
    if scaled < lo {
        (format.min_raw(), true)
    } else if scaled > hi {
        (format.max_raw(), true)
    } else {
        (scaled as i32, false)
    }
}

pub fn quantize(values: &[f64], shape: Vec<usize>, format: FxpFormat) -> Result<Quantized> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidFormat(format!("non-finite value {v}")));
    }
    let mut saturated = 0;
    let data = values
        .iter()
        .map(|&v| {
            let (raw, sat) = quantize_value(v, format);
            saturated += sat as u64;
            raw
        })
        .collect();
    Ok(Quantized {
        tensor: FxpTensor::new(shape, data, format)?,
        saturated,
    })
}

/// Exact product of two raw words at `mul_out_bits`.
#[inline(always)]
pub fn fxp_mul(a: i32, b: i32, dp: &DatapathSpec) -> i64 {
    wrap_to(a as i64 * b as i64, dp.mul_out_bits)
}

/// Sum at accumulator width. The flag reports an overflow (wrapped or clipped).
#[inline(always)]
pub fn fxp_add_checked(a: i64, b: i64, dp: &DatapathSpec) -> (i64, bool) {
    let exact = a + b;
    if dp.wrap_on_overflow {
        let w = wrap_to(exact, dp.acc_bits);
        (w, w != exact)
    } else {
        saturate_to(exact, dp.acc_bits)
    }
}

#[inline(always)]
pub fn fxp_add(a: i64, b: i64, dp: &DatapathSpec) -> i64 {
    fxp_add_checked(a, b, dp).0
}

/// Arithmetic right shift by `in_frac - out.frac_bits` with round-half-up on
/// the dropped bits, then saturation to `out`. Returns the raw word and
/// whether it was clipped.
#[inline(always)]
pub fn requantize_checked(v: i64, in_frac: u32, out: FxpFormat) -> (i32, bool) {
    debug_assert!(in_frac >= out.frac_bits);
    let shift = in_frac - out.frac_bits;
    let shifted = if shift == 0 {
        v
    } else {
        (v + (1i64 << (shift - 1))) >> shift
    };
    out.saturate(shifted)
}

#[inline(always)]
pub fn requantize(v: i64, in_frac: u32, out: FxpFormat) -> i32 {
    requantize_checked(v, in_frac, out).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantize_examples() {
        let fmt = FxpFormat::new(8, 6).unwrap();
        assert_eq!(quantize_value(0.5, fmt), (32, false));
        assert_eq!(quantize_value(100.0, fmt), (127, true));
        assert_eq!(quantize_value(-100.0, fmt), (-128, true));
        // ties go to even
        assert_eq!(quantize_value(1.5 / 64.0, fmt).0, 2);
        assert_eq!(quantize_value(2.5 / 64.0, fmt).0, 2);
    }

    #[test]
    fn quantize_counts_saturation() {
        let q = quantize(&[0.0, 10.0, -10.0, 0.25], vec![4], FxpFormat::INT8).unwrap();
        assert_eq!(q.saturated, 2);
        assert!(quantize(&[f64::NAN], vec![1], FxpFormat::INT8).is_err());
    }

    #[test]
    fn ramp_round_trip_error_bounded() {
        // Every raw code of (8, 6) plus midpoints between them.
        let fmt = FxpFormat::new(8, 6).unwrap();
        let step = 1.0 / 64.0;
        let values: Vec<f64> = (0..256).map(|i| -1.0 + i as f64 * (2.0 / 256.0)).collect();
        let q = quantize(&values, vec![256], fmt).unwrap();
        for (v, r) in values.iter().zip(q.tensor.dequantize()) {
            assert!((v - r).abs() <= step / 2.0 + 1e-15, "{v} -> {r}");
        }
        for raw in fmt.min_raw()..=fmt.max_raw() {
            let (back, sat) = quantize_value(fmt.to_real(raw), fmt);
            assert!(!sat);
            assert_eq!(back, raw);
        }
    }

    #[test]
    fn mul_examples() {
        let dp = DatapathSpec::for_format(FxpFormat::INT8);
        assert_eq!(fxp_mul(2, 3, &dp), 6);
        assert_eq!(fxp_mul(-128, -128, &dp), 16384);
    }

    #[test]
    fn mul_exhaustive_int8() {
        let dp = DatapathSpec::for_format(FxpFormat::INT8);
        for a in -128i32..=127 {
            for b in -128i32..=127 {
                let oracle = num_bigint::BigInt::from(a) * num_bigint::BigInt::from(b);
                assert_eq!(num_bigint::BigInt::from(fxp_mul(a, b, &dp)), oracle);
            }
        }
    }

    #[test]
    fn add_examples() {
        let dp = DatapathSpec::for_format(FxpFormat::INT8);
        assert_eq!(fxp_add(1, -1, &dp), 0);
        let (v, of) = fxp_add_checked((1 << 31) - 1, 1, &dp);
        assert_eq!(v, -(1i64 << 31));
        assert!(of);
        let sat = DatapathSpec {
            wrap_on_overflow: false,
            ..dp
        };
        assert_eq!(fxp_add_checked((1 << 31) - 1, 1, &sat), ((1 << 31) - 1, true));
    }

    #[test]
    fn add_matches_bigint_mod_2_32() {
        use num_bigint::BigInt;
        let dp = DatapathSpec::for_format(FxpFormat::INT8);
        let modulus = BigInt::from(1u64 << 32);
        let half = BigInt::from(1u64 << 31);
        let mut rng = crate::rng::RngStream::new(&[0xadd, 1]);
        for _ in 0..100_000 {
            let a = wrap_to(rng.next_u64() as i64, 32);
            let b = wrap_to(rng.next_u64() as i64, 32);
            let mut oracle = (BigInt::from(a) + BigInt::from(b)) % &modulus;
            if oracle < BigInt::from(0) {
                oracle += &modulus;
            }
            if oracle >= half {
                oracle -= &modulus;
            }
            assert_eq!(BigInt::from(fxp_add(a, b, &dp)), oracle);
        }
    }

    #[test]
    fn requantize_examples() {
        let out = FxpFormat::new(8, 6).unwrap();
        assert_eq!(requantize(256, 12, out), 4);
        assert_eq!(requantize_checked(1 << 20, 12, out), (127, true));
        let out1 = FxpFormat::new(8, 0).unwrap();
        assert_eq!(requantize(5, 1, out1), 3);
        assert_eq!(requantize(-5, 1, out1), -2);
    }

    proptest! {
        #[test]
        fn requantize_inverts_mul_by_one(x in -128i32..=127, frac in 0u32..7) {
            let fmt = FxpFormat::new(8, frac).unwrap();
            let dp = DatapathSpec::for_format(fmt);
            let one = fmt.one().unwrap();
            prop_assert_eq!(requantize(fxp_mul(x, one, &dp), 2 * frac, fmt), x);
        }

        #[test]
        fn requantize_inverts_mul_by_one_int16(x in -32768i32..=32767, frac in 0u32..15) {
            let fmt = FxpFormat::new(16, frac).unwrap();
            let dp = DatapathSpec::for_format(fmt);
            let one = fmt.one().unwrap();
            prop_assert_eq!(requantize(fxp_mul(x, one, &dp), 2 * frac, fmt), x);
        }

        #[test]
        fn quantize_dequantize_idempotent(raw in -32768i32..=32767) {
            let fmt = FxpFormat::INT16;
            let real = fmt.to_real(raw);
            let (again, _) = quantize_value(real, fmt);
            prop_assert_eq!(again, raw);
            prop_assert_eq!(quantize_value(fmt.to_real(again), fmt).0, again);
        }

        #[test]
        fn add_commutes_and_associates(a in any::<i32>(), b in any::<i32>(), c in any::<i32>()) {
            let dp = DatapathSpec::for_format(FxpFormat::INT16);
            let (a, b, c) = (a as i64, b as i64, c as i64);
            prop_assert_eq!(fxp_add(a, b, &dp), fxp_add(b, a, &dp));
            prop_assert_eq!(
                fxp_add(fxp_add(a, b, &dp), c, &dp),
                fxp_add(a, fxp_add(b, c, &dp), &dp)
            );
        }
    }
}
