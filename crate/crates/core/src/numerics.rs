//! E2M1 (FP4) and E4M3 (FP8) element codecs.
//!
//! Both formats are sign-magnitude minifloats. Encoding rounds to the
//! nearest representable value, breaks ties toward the even mantissa bit and
//! saturates at the largest finite magnitude (6 for E2M1, 448 for E4M3).
//! E4M3 has no infinities; codes `0x7F` and `0xFF` are NaN and are never
//! produced by the encoder.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest finite E2M1 magnitude.
pub const FP4_MAX: f32 = 6.0;
/// Largest finite E4M3 magnitude.
pub const FP8_MAX: f32 = 448.0;

/// A 4-bit E2M1 code: `s ee m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Fp4Code(u8);

/// An 8-bit E4M3 code: `s eeee mmm`, exponent bias 7.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Fp8Code(u8);

impl Fp4Code {
    pub const POS_ZERO: Fp4Code = Fp4Code(0x0);
    pub const NEG_ZERO: Fp4Code = Fp4Code(0x8);
    pub const MAX: Fp4Code = Fp4Code(0x7);

    /// Wraps the low nibble of `bits`; returns `None` if the high nibble is set.
    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits <= 0xF).then_some(Self(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn value(self) -> f32 {
        decode_fp4(self)
    }

    /// All 16 codes in ascending bit order.
    pub fn all() -> impl Iterator<Item = Fp4Code> {
        (0u8..16).map(Fp4Code)
    }
}

impl Fp8Code {
    pub const POS_ZERO: Fp8Code = Fp8Code(0x00);
    pub const ONE: Fp8Code = Fp8Code(0x38);
    pub const MAX: Fp8Code = Fp8Code(0x7E);
    /// Smallest positive subnormal, 2^-9.
    pub const MIN_POSITIVE: Fp8Code = Fp8Code(0x01);

    pub fn from_bits(bits: u8) -> Self {
        Self(bits)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7F == 0x7F
    }

    pub fn value(self) -> f32 {
        decode_fp8(self)
    }

    /// All 256 codes in ascending bit order, NaNs included.
    pub fn all() -> impl Iterator<Item = Fp8Code> {
        (0u8..=255).map(Fp8Code)
    }

    /// Positive finite codes in ascending order of decoded value.
    pub fn positive_finite() -> impl Iterator<Item = Fp8Code> {
        (0x01u8..=0x7E).map(Fp8Code)
    }
}

pub fn decode_fp4(c: Fp4Code) -> f32 {
    let bits = c.0;
    let exp = (bits >> 1) & 0x3;
    let man = (bits & 0x1) as f32;
    let mag = if exp == 0 {
        man * 0.5
    } else {
        (1.0 + man * 0.5) * (1u32 << (exp - 1)) as f32
    };
    if bits & 0x8 != 0 {
        -mag
    } else {
        mag
    }
}

pub fn decode_fp8(c: Fp8Code) -> f32 {
    let bits = c.0;
    if c.is_nan() {
        return f32::NAN;
    }
    let exp = ((bits >> 3) & 0xF) as i32;
    let man = (bits & 0x7) as f32;
    let mag = if exp == 0 {
        man / 8.0 * 2f32.powi(-6)
    } else {
        (1.0 + man / 8.0) * 2f32.powi(exp - 7)
    };
    if bits & 0x80 != 0 {
        -mag
    } else {
        mag
    }
}

pub fn encode_fp4(v: f64) -> Result<Fp4Code> {
    let mag = encode_magnitude(v, &FP4_LAYOUT)?;
    Ok(Fp4Code(mag | sign_bit(v) >> 4))
}

pub fn encode_fp8(v: f64) -> Result<Fp8Code> {
    let mag = encode_magnitude(v, &FP8_LAYOUT)?;
    Ok(Fp8Code(mag | sign_bit(v)))
}

/// Shared description of a sign-magnitude minifloat.
struct Layout {
    man_bits: u32,
    bias: i32,
    max_mag: f64,
    max_code: u8,
}

const FP4_LAYOUT: Layout = Layout {
    man_bits: 1,
    bias: 1,
    max_mag: FP4_MAX as f64,
    max_code: 0x7,
};

const FP8_LAYOUT: Layout = Layout {
    man_bits: 3,
    bias: 7,
    max_mag: FP8_MAX as f64,
    max_code: 0x7E,
};

fn sign_bit(v: f64) -> u8 {
    if v.is_sign_negative() {
        0x80
    } else {
        0
    }
}

/// Magnitude bits (sign excluded) of the nearest code, ties to even.
fn encode_magnitude(v: f64, layout: &Layout) -> Result<u8> {
    if !v.is_finite() {
        return Err(Error::NonFinite(v));
    }
    let a = v.abs();
    if a >= layout.max_mag {
        return Ok(layout.max_code);
    }
    if a == 0.0 {
        return Ok(0);
    }

    let min_exp = 1 - layout.bias;
    // Unbiased binary exponent of `a`; f64 subnormals land far below min_exp.
    let raw_exp = ((a.to_bits() >> 52) & 0x7FF) as i32 - 1023;
    let mut exp = raw_exp.max(min_exp);

    // a / quantum is exact: quantum is a power of two.
    let quantum = 2f64.powi(exp - layout.man_bits as i32);
    let mut steps = (a / quantum).round_ties_even() as u32;

    let implicit = 1u32 << layout.man_bits;
    let code = if exp == min_exp && steps < implicit {
        // subnormal (or zero after rounding)
        steps
    } else {
        if steps == implicit << 1 {
            exp += 1;
            steps = implicit;
        }
        let exp_field = (exp + layout.bias) as u32;
        (exp_field << layout.man_bits) | (steps - implicit)
    };
    Ok((code as u8).min(layout.max_code))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Brute-force nearest-value search over a decoded table, preferring the
    // code with a zero mantissa LSB on ties. Saturation is implied because
    // the table's extreme entries are the nearest for out-of-range inputs.
    fn oracle(v: f64, table: &[(u8, f64)]) -> f64 {
        let mut best: Option<(f64, u8, f64)> = None;
        for &(code, val) in table {
            let d = (val - v).abs();
            best = match best {
                None => Some((d, code, val)),
                Some((bd, bc, bv)) => {
                    if d < bd || (d == bd && bc & 1 == 1 && code & 1 == 0) {
                        Some((d, code, val))
                    } else {
                        Some((bd, bc, bv))
                    }
                }
            };
        }
        best.unwrap().2
    }

    fn fp4_table() -> Vec<(u8, f64)> {
        Fp4Code::all()
            .map(|c| (c.bits(), decode_fp4(c) as f64))
            .collect()
    }

    fn fp8_table() -> Vec<(u8, f64)> {
        Fp8Code::all()
            .filter(|c| !c.is_nan())
            .map(|c| (c.bits(), decode_fp8(c) as f64))
            .collect()
    }

    #[test]
    fn fp4_value_set() {
        let pos: Vec<f32> = (0u8..8).map(|b| decode_fp4(Fp4Code(b))).collect();
        assert_eq!(pos, vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]);
        assert_eq!(decode_fp4(Fp4Code(0b0111)), 6.0);
        assert_eq!(decode_fp4(Fp4Code(0b1001)), -0.5);
        assert_eq!(decode_fp4(Fp4Code::NEG_ZERO), 0.0);
    }

    #[test]
    fn fp4_encode_examples() {
        assert_eq!(encode_fp4(0.0).unwrap(), Fp4Code::POS_ZERO);
        assert_eq!(encode_fp4(-0.0).unwrap(), Fp4Code::NEG_ZERO);
        assert_eq!(decode_fp4(encode_fp4(2.5).unwrap()), 2.0);
        assert_eq!(decode_fp4(encode_fp4(100.0).unwrap()), 6.0);
        assert_eq!(decode_fp4(encode_fp4(-100.0).unwrap()), -6.0);
        // 0.75 ties between 0.5 (odd mantissa) and 1.0 (even)
        assert_eq!(decode_fp4(encode_fp4(0.75).unwrap()), 1.0);
        // 5.0 ties between 4 and 6
        assert_eq!(decode_fp4(encode_fp4(5.0).unwrap()), 4.0);
        assert_eq!(decode_fp4(encode_fp4(0.25).unwrap()), 0.0);
    }

    #[test]
    fn fp8_encode_examples() {
        let max = encode_fp8(448.0).unwrap();
        assert_eq!(max, Fp8Code::MAX);
        assert_eq!(decode_fp8(max), 448.0);
        assert_eq!(decode_fp8(encode_fp8(500.0).unwrap()), 448.0);
        assert_eq!(encode_fp8(1.0).unwrap(), Fp8Code::ONE);
        assert_eq!(decode_fp8(Fp8Code::MIN_POSITIVE), 2f32.powi(-9));
        // half of the smallest subnormal ties to zero
        assert_eq!(decode_fp8(encode_fp8(2f64.powi(-10)).unwrap()), 0.0);
        // 464 ties between 448 (mantissa 6) and the NaN slot; never NaN
        assert_eq!(decode_fp8(encode_fp8(464.0).unwrap()), 448.0);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(encode_fp4(f64::NAN).is_err());
        assert!(encode_fp4(f64::INFINITY).is_err());
        assert!(encode_fp8(f64::NEG_INFINITY).is_err());
    }

    #[test]
    fn nan_codes_decode_but_are_not_produced() {
        assert!(decode_fp8(Fp8Code(0x7F)).is_nan());
        assert!(decode_fp8(Fp8Code(0xFF)).is_nan());
        for c in Fp8Code::all().filter(|c| !c.is_nan()) {
            let back = encode_fp8(decode_fp8(c) as f64).unwrap();
            assert!(!back.is_nan());
        }
    }

    #[test]
    fn exhaustive_round_trip() {
        for c in Fp4Code::all() {
            let v = decode_fp4(c);
            assert_eq!(decode_fp4(encode_fp4(v as f64).unwrap()), v);
            // signed zeros keep their sign bit
            assert_eq!(encode_fp4(v as f64).unwrap(), c);
        }
        for c in Fp8Code::all().filter(|c| !c.is_nan()) {
            let v = decode_fp8(c);
            assert_eq!(encode_fp8(v as f64).unwrap(), c);
        }
    }

    #[test]
    fn matches_oracle_on_midpoints() {
        let t4 = fp4_table();
        let mut mags: Vec<f64> = t4.iter().map(|e| e.1.abs()).collect();
        mags.sort_by(f64::total_cmp);
        mags.dedup();
        for w in mags.windows(2) {
            for v in [(w[0] + w[1]) / 2.0, -(w[0] + w[1]) / 2.0] {
                assert_eq!(
                    decode_fp4(encode_fp4(v).unwrap()) as f64,
                    oracle(v, &t4),
                    "{v}"
                );
            }
        }
        let t8 = fp8_table();
        let mut mags: Vec<f64> = t8.iter().map(|e| e.1.abs()).collect();
        mags.sort_by(f64::total_cmp);
        mags.dedup();
        for w in mags.windows(2) {
            let v = (w[0] + w[1]) / 2.0;
            assert_eq!(
                decode_fp8(encode_fp8(v).unwrap()) as f64,
                oracle(v, &t8),
                "{v}"
            );
        }
    }

    proptest! {
        #[test]
        fn fp4_matches_oracle(v in -10.0f64..10.0) {
            prop_assert_eq!(decode_fp4(encode_fp4(v).unwrap()) as f64, oracle(v, &fp4_table()));
        }

        #[test]
        fn fp8_matches_oracle(mag in -14.0f64..10.0, neg: bool) {
            let v = if neg { -mag.exp2() } else { mag.exp2() };
            prop_assert_eq!(decode_fp8(encode_fp8(v).unwrap()) as f64, oracle(v, &fp8_table()));
        }

        #[test]
        fn encode_is_monotone(a in -600.0f64..600.0, b in -600.0f64..600.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(decode_fp8(encode_fp8(lo).unwrap()) <= decode_fp8(encode_fp8(hi).unwrap()));
            prop_assert!(decode_fp4(encode_fp4(lo).unwrap()) <= decode_fp4(encode_fp4(hi).unwrap()));
        }
    }
}
