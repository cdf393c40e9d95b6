//! IEEE-754 binary16 bit patterns and the single-bit fault model.
//!
//! Bit positions are numbered LSB = 0:
//!
//! ```text
//!  15 | 14 13 12 11 10 | 9 8 7 6 5 4 3 2 1 0
//! sign|    exponent    |       mantissa
//! ```
//!
//! Position 14 is the exponent MSB. For every weight with magnitude below 1
//! it holds a 0, and flipping it to 1 multiplies a normal value by 2^16.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const EXPONENT_MASK: u16 = 0x7C00;
const MANTISSA_MASK: u16 = 0x03FF;
const SIGN_MASK: u16 = 0x8000;

/// Quiet NaN written by [`encode_half`] for every NaN input.
pub const CANONICAL_NAN: u16 = 0x7E00;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("bit position {0} is out of range 0..=15")]
    BitOutOfRange(u32),
    #[error("amplification is undefined for {0}: {1}")]
    Amplification(Half16, &'static str),
}

/// A raw binary16 pattern. Every one of the 65536 values is a valid input.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
#[repr(transparent)]
pub struct Half16(pub u16);

impl Half16 {
    pub const ZERO: Half16 = Half16(0);
    pub const INFINITY: Half16 = Half16(EXPONENT_MASK);
    pub const NEG_INFINITY: Half16 = Half16(SIGN_MASK | EXPONENT_MASK);

    #[inline]
    pub const fn from_bits(bits: u16) -> Self {
        Half16(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    #[inline]
    pub const fn exponent_field(self) -> u16 {
        (self.0 & EXPONENT_MASK) >> 10
    }

    #[inline]
    pub const fn mantissa_field(self) -> u16 {
        self.0 & MANTISSA_MASK
    }

    #[inline]
    pub const fn is_sign_negative(self) -> bool {
        self.0 & SIGN_MASK != 0
    }

    #[inline]
    pub const fn is_nan(self) -> bool {
        self.exponent_field() == 31 && self.mantissa_field() != 0
    }

    #[inline]
    pub const fn is_infinite(self) -> bool {
        self.exponent_field() == 31 && self.mantissa_field() == 0
    }

    #[inline]
    pub const fn is_finite(self) -> bool {
        self.exponent_field() != 31
    }

    #[inline]
    pub const fn is_zero(self) -> bool {
        self.0 & !SIGN_MASK == 0
    }

    #[inline]
    pub const fn is_subnormal(self) -> bool {
        self.exponent_field() == 0 && self.mantissa_field() != 0
    }

    #[inline]
    pub const fn is_normal(self) -> bool {
        let e = self.exponent_field();
        e != 0 && e != 31
    }

    #[inline]
    pub const fn bit(self, p: BitPosition) -> bool {
        self.0 >> p.0 & 1 == 1
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        decode_half(self)
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        // Every binary16 value is exactly representable in binary32.
        decode_half(self) as f32
    }

    #[inline]
    pub fn from_f64(x: f64) -> Self {
        encode_half(x)
    }

    #[inline]
    pub fn flip(self, p: BitPosition) -> Self {
        flip_bit(self, p)
    }
}

impl fmt::Debug for Half16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Half16({:#06x} = {})", self.0, decode_half(*self))
    }
}

impl fmt::Display for Half16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#06x}", self.0)
    }
}

/// Index of a bit inside a [`Half16`], 0 (mantissa LSB) through 15 (sign).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct BitPosition(u8);

impl BitPosition {
    pub const SIGN: BitPosition = BitPosition(15);
    /// The exponent MSB, the critical bit for sub-unit weights.
    pub const EXPONENT_MSB: BitPosition = BitPosition(14);
    pub const EXPONENT_SECOND: BitPosition = BitPosition(13);

    pub fn new(index: u32) -> Result<Self, CodecError> {
        if index < 16 {
            Ok(BitPosition(index as u8))
        } else {
            Err(CodecError::BitOutOfRange(index))
        }
    }

    #[inline]
    pub const fn index(self) -> u32 {
        self.0 as u32
    }

    #[inline]
    pub const fn mask(self) -> u16 {
        1 << self.0
    }

    pub fn field(self) -> BitField {
        bit_field_of(self)
    }

    pub fn all() -> impl DoubleEndedIterator<Item = BitPosition> + ExactSizeIterator {
        (0u8..16).map(BitPosition)
    }
}

impl Default for BitPosition {
    fn default() -> Self {
        BitPosition::EXPONENT_MSB
    }
}

impl TryFrom<u32> for BitPosition {
    type Error = CodecError;
    fn try_from(value: u32) -> Result<Self, Self::Error> {
        BitPosition::new(value)
    }
}

impl From<BitPosition> for u32 {
    fn from(p: BitPosition) -> u32 {
        p.index()
    }
}

impl fmt::Debug for BitPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bit{}", self.0)
    }
}

impl fmt::Display for BitPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BitField {
    Sign,
    Exponent,
    Mantissa,
}

pub fn bit_field_of(p: BitPosition) -> BitField {
    match p.0 {
        15 => BitField::Sign,
        10..=14 => BitField::Exponent,
        _ => BitField::Mantissa,
    }
}

/// Exact value of a binary16 pattern. NaN payloads are not carried into the
/// `f64`; use the pattern itself when bit-exactness matters.
pub fn decode_half(h: Half16) -> f64 {
    let e = h.exponent_field() as i32;
    let m = h.mantissa_field() as f64;
    let magnitude = match e {
        0 => m / 1024.0 * 2f64.powi(-14),
        31 if m == 0.0 => f64::INFINITY,
        31 => f64::NAN,
        _ => (1.0 + m / 1024.0) * 2f64.powi(e - 15),
    };
    if h.is_sign_negative() {
        -magnitude
    } else {
        magnitude
    }
}

/// Round-to-nearest-even conversion to binary16. Magnitudes that round past
/// the largest finite value (65504) become infinity.
pub fn encode_half(x: f64) -> Half16 {
    if x.is_nan() {
        return Half16(CANONICAL_NAN);
    }
    let sign = if x.is_sign_negative() { SIGN_MASK } else { 0 };
    let a = x.abs();
    if a >= 65520.0 {
        return Half16(sign | EXPONENT_MASK);
    }
    if a < 2f64.powi(-14) {
        // Subnormal range, including rounding up into the smallest normal
        // (1024 == 0x0400).
        let m = (a * 2f64.powi(24)).round_ties_even() as u16;
        return Half16(sign | m);
    }
    let e = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    let significand = a / 2f64.powi(e);
    let m = ((significand - 1.0) * 1024.0).round_ties_even() as u16;
    // A mantissa that rounds to 1024 carries into the exponent field.
    let bits = (((e + 15) as u16) << 10) + m;
    if bits >= EXPONENT_MASK {
        Half16(sign | EXPONENT_MASK)
    } else {
        Half16(sign | bits)
    }
}

#[inline]
pub fn flip_bit(h: Half16, p: BitPosition) -> Half16 {
    Half16(h.0 ^ p.mask())
}

/// Magnitude ratio produced by flipping the exponent MSB of `h`.
///
/// Exactly 65536 for normal inputs; subnormals land in the normal range and
/// follow the exact IEEE values instead.
pub fn critical_flip_amplification(h: Half16) -> Result<f64, CodecError> {
    if h.is_zero() {
        return Err(CodecError::Amplification(h, "zero"));
    }
    if !h.is_finite() {
        return Err(CodecError::Amplification(h, "not finite"));
    }
    if h.bit(BitPosition::EXPONENT_MSB) {
        return Err(CodecError::Amplification(h, "exponent MSB already set"));
    }
    let flipped = flip_bit(h, BitPosition::EXPONENT_MSB);
    Ok(decode_half(flipped).abs() / decode_half(h).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bit(i: u32) -> BitPosition {
        BitPosition::new(i).unwrap()
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_half(Half16(0x3800)), 0.5);
        let z = decode_half(Half16(0x0000));
        assert_eq!(z, 0.0);
        assert!(z.is_sign_positive());
        assert_eq!(decode_half(Half16(0x7C00)), f64::INFINITY);
        assert_eq!(decode_half(Half16(0xFC00)), f64::NEG_INFINITY);
        assert!(decode_half(Half16(0x7C01)).is_nan());
        assert_eq!(decode_half(Half16(0x7BFF)), 65504.0);
        assert_eq!(decode_half(Half16(0x0001)), 2f64.powi(-24));
        assert_eq!(decode_half(Half16(0x0400)), 2f64.powi(-14));
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_half(0.5), Half16(0x3800));
        assert_eq!(encode_half(65536.0), Half16(0x7C00));
        assert_eq!(encode_half(2f64.powi(-24)), Half16(0x0001));
        assert_eq!(encode_half(f64::NAN), Half16(CANONICAL_NAN));
        assert_eq!(encode_half(-0.0), Half16(0x8000));
        assert_eq!(encode_half(65504.0), Half16(0x7BFF));
        assert_eq!(encode_half(65519.99), Half16(0x7BFF));
        assert_eq!(encode_half(65520.0), Half16(0x7C00));
        assert_eq!(encode_half(f64::NEG_INFINITY), Half16(0xFC00));
        // Below half the smallest subnormal rounds to zero; exactly half ties to even (0).
        assert_eq!(encode_half(2f64.powi(-25)), Half16(0x0000));
        assert_eq!(encode_half(1.5 * 2f64.powi(-24)), Half16(0x0002));
    }

    #[test]
    fn encode_rounds_ties_to_even() {
        // 1 + 1/2048 is halfway between 1.0 (even) and 1 + 1/1024.
        assert_eq!(encode_half(1.0 + 1.0 / 2048.0), Half16(0x3C00));
        // 1 + 3/2048 is halfway between 0x3C01 (odd) and 0x3C02.
        assert_eq!(encode_half(1.0 + 3.0 / 2048.0), Half16(0x3C02));
        // Mantissa carry into the exponent.
        assert_eq!(encode_half(2.0 - 1.0 / 4096.0), Half16(0x4000));
        // Largest subnormal carry into the smallest normal.
        assert_eq!(encode_half(2f64.powi(-14) - 2f64.powi(-26)), Half16(0x0400));
    }

    #[test]
    fn flip_examples() {
        assert_eq!(flip_bit(Half16(0x3800), bit(14)), Half16(0x7800));
        assert_eq!(decode_half(Half16(0x7800)), 32768.0);
        assert_eq!(flip_bit(Half16(0x0000), bit(15)), Half16(0x8000));
        for p in BitPosition::all() {
            assert_eq!(flip_bit(flip_bit(Half16(0x1234), p), p), Half16(0x1234));
        }
    }

    #[test]
    fn nan_payload_survives_flips() {
        let nan = Half16(0x7D55);
        let flipped = flip_bit(nan, bit(0));
        assert_eq!(flipped, Half16(0x7D54));
        assert!(flipped.is_nan());
    }

    #[test]
    fn bit_fields() {
        assert_eq!(bit_field_of(bit(14)), BitField::Exponent);
        assert_eq!(bit_field_of(bit(15)), BitField::Sign);
        assert_eq!(bit_field_of(bit(3)), BitField::Mantissa);
        assert_eq!(bit_field_of(bit(10)), BitField::Exponent);
        assert_eq!(bit_field_of(bit(9)), BitField::Mantissa);
        assert!(BitPosition::new(16).is_err());
    }

    #[test]
    fn amplification_examples() {
        assert_eq!(critical_flip_amplification(Half16(0x3800)).unwrap(), 65536.0);
        assert_eq!(
            critical_flip_amplification(Half16(0x0001)).unwrap(),
            33_587_200.0
        );
        assert!(critical_flip_amplification(Half16(0x0000)).is_err());
        assert!(critical_flip_amplification(Half16(0x8000)).is_err());
        assert!(critical_flip_amplification(Half16(0x7C00)).is_err());
        assert!(critical_flip_amplification(Half16(0x7E00)).is_err());
        assert!(critical_flip_amplification(Half16(0x4000)).is_err());
    }

    #[test]
    fn exhaustive_roundtrip_and_sign_negation() {
        for bits in 0..=u16::MAX {
            let h = Half16(bits);
            let x = decode_half(h);
            if !h.is_nan() {
                assert_eq!(encode_half(x), h, "{h:?}");
                let neg = decode_half(flip_bit(h, BitPosition::SIGN));
                assert_eq!(neg.to_bits(), (-x).to_bits());
            }
        }
    }

    #[test]
    fn bit_position_serde() {
        let p: BitPosition = serde_json::from_str("14").unwrap();
        assert_eq!(p, BitPosition::EXPONENT_MSB);
        assert!(serde_json::from_str::<BitPosition>("16").is_err());
        assert_eq!(serde_json::to_string(&p).unwrap(), "14");
    }
}
