//! IEEE 754 binary16 values with explicit rounding semantics.
//!
//! [`Half`] is a bag of 16 bits. Arithmetic on halves is never performed
//! directly: values are widened to binary32 (exact), combined there, and
//! rounded back with [`fp16_round`] only at the points a pipeline declares as
//! rounding points (dequantized values, final outputs). This makes equality
//! between two computation paths a statement about identical bit patterns
//! rather than approximate closeness.
//!
//! Conversion rules:
//! * binary32 -> binary16 rounds to nearest, ties to even;
//! * overflow saturates to the signed infinity;
//! * NaN maps to the canonical quiet pattern `0x7e00`;
//! * every binary16 value round-trips through binary32 exactly.

use std::fmt;

const F16_SIGN: u16 = 0x8000;
const F16_EXP_MASK: u16 = 0x7c00;
const F16_MAN_MASK: u16 = 0x03ff;
const F16_CANONICAL_NAN: u16 = 0x7e00;

/// A binary16 value, stored as its raw bit pattern.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Half(u16);

impl Half {
    pub const ZERO: Half = Half(0x0000);
    pub const ONE: Half = Half(0x3c00);
    pub const INFINITY: Half = Half(0x7c00);
    pub const NEG_INFINITY: Half = Half(0xfc00);
    pub const NAN: Half = Half(F16_CANONICAL_NAN);
    /// Largest finite binary16 value, 65504.
    pub const MAX: Half = Half(0x7bff);
    /// Smallest positive normal, 2^-14.
    pub const MIN_POSITIVE: Half = Half(0x0400);

    #[inline]
    pub const fn from_bits(bits: u16) -> Half {
        Half(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Round a binary32 value to the nearest binary16, ties to even.
    pub fn from_f32(x: f32) -> Half {
        Half(f32_to_f16_bits(x))
    }

    /// Widen to binary32. Exact for every binary16 value.
    pub fn to_f32(self) -> f32 {
        f16_bits_to_f32(self.0)
    }

    #[inline]
    pub fn is_nan(self) -> bool {
        self.0 & F16_EXP_MASK == F16_EXP_MASK && self.0 & F16_MAN_MASK != 0
    }

    #[inline]
    pub fn is_infinite(self) -> bool {
        self.0 & 0x7fff == 0x7c00
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.0 & F16_EXP_MASK != F16_EXP_MASK
    }

    /// The value as an exact integer multiple of 2^-24.
    ///
    /// Every finite binary16 value is an integer multiple of 2^-24 (the
    /// smallest subnormal), with magnitude below 2^41. This is the hook the
    /// exact dot-product accumulators build on.
    ///
    /// Panics on non-finite values; callers gate on finiteness first.
    pub fn to_fixed_q24(self) -> i64 {
        assert!(self.is_finite(), "to_fixed_q24 on non-finite half");
        let sign = if self.0 & F16_SIGN != 0 { -1i64 } else { 1i64 };
        let exp = ((self.0 & F16_EXP_MASK) >> 10) as i64;
        let man = (self.0 & F16_MAN_MASK) as i64;
        if exp == 0 {
            // subnormal: man * 2^-24
            sign * man
        } else {
            // (1024 + man) * 2^(exp - 25 + 24) = (1024 + man) << (exp - 1)
            sign * ((1024 + man) << (exp - 1))
        }
    }
}

impl fmt::Debug for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Half({} = {:#06x})", self.to_f32(), self.0)
    }
}

impl fmt::Display for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f32())
    }
}

/// Round a binary32 value to the nearest binary16, ties to even.
///
/// This is the single rounding point used everywhere in the crate.
#[inline]
pub fn fp16_round(x: f32) -> Half {
    Half::from_f32(x)
}

fn f32_to_f16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xff) as i32;
    let man = bits & 0x007f_ffff;

    if exp == 0xff {
        // Infinity keeps its sign; NaN collapses to the canonical pattern.
        return if man == 0 {
            sign | 0x7c00
        } else {
            F16_CANONICAL_NAN
        };
    }

    // Rebias. e is the binary16 biased exponent the value would have.
    let e = exp - 127 + 15;

    if e >= 0x1f {
        // Overflows even before rounding.
        return sign | 0x7c00;
    }

    if e <= 0 {
        // Result is subnormal (or zero). Values below half the smallest
        // subnormal round to zero; exactly half rounds to even, i.e. zero.
        if e < -10 {
            return sign;
        }
        let man = man | 0x0080_0000; // make the leading 1 explicit
        let shift = (1 - e) as u32 + 13;
        let kept = man >> shift;
        let round = (man >> (shift - 1)) & 1;
        let sticky = man & ((1u32 << (shift - 1)) - 1);
        let mut h = kept as u16;
        if round == 1 && (sticky != 0 || h & 1 == 1) {
            h += 1; // may carry into the normal range; the bit pattern is then correct
        }
        return sign | h;
    }

    // Normal range: keep the top 10 mantissa bits and round.
    let kept = (man >> 13) as u16;
    let round = (man >> 12) & 1;
    let sticky = man & 0x0fff;
    let mut h = ((e as u16) << 10) | kept;
    if round == 1 && (sticky != 0 || h & 1 == 1) {
        h += 1; // carries through the exponent; 0x7bff + 1 = 0x7c00 = infinity
    }
    sign | h
}

fn f16_bits_to_f32(h: u16) -> f32 {
    let sign = ((h as u32) & 0x8000) << 16;
    let exp = ((h & F16_EXP_MASK) >> 10) as u32;
    let man = (h & F16_MAN_MASK) as u32;

    let bits = if exp == 0 {
        if man == 0 {
            sign
        } else {
            // Normalize the subnormal.
            let mut e = 127 - 15 + 1;
            let mut m = man;
            while m & 0x0400 == 0 {
                m <<= 1;
                e -= 1;
            }
            sign | ((e as u32) << 23) | ((m & F16_MAN_MASK as u32) << 13)
        }
    } else if exp == 0x1f {
        sign | 0x7f80_0000 | (man << 13)
    } else {
        sign | ((exp + 127 - 15) << 23) | (man << 13)
    };
    f32::from_bits(bits)
}
