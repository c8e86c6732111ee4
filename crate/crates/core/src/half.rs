//! Software IEEE 754 binary16 and static loss scaling.
//!
//! Every mixed-precision code path in the crate funnels through
//! [`f32_to_f16`] / [`f16_to_f32`]. Conversion is round-to-nearest-even,
//! overflows saturate to infinity and NaN stays NaN. The bulk slice helpers
//! use the F16C instructions when the CPU has them; they produce the same
//! bits as the scalar routines for every non-NaN input.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HalfError {
    /// A gradient was infinite or NaN after scaling; the scale is too large.
    #[error("non-finite gradient at index {index} (value {value}); loss scale too large")]
    OverflowDetected { index: usize, value: f32 },
    #[error("loss scale must be a positive power of two, got {0}")]
    InvalidScale(f32),
}

/// A binary16 value stored as its raw bit pattern (1 sign, 5 exponent, 10 mantissa bits).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Binary16(u16);

impl Binary16 {
    pub const ZERO: Binary16 = Binary16(0x0000);
    pub const NEG_ZERO: Binary16 = Binary16(0x8000);
    pub const ONE: Binary16 = Binary16(0x3C00);
    pub const INFINITY: Binary16 = Binary16(0x7C00);
    pub const NEG_INFINITY: Binary16 = Binary16(0xFC00);
    pub const NAN: Binary16 = Binary16(0x7E00);
    /// 65504.
    pub const MAX: Binary16 = Binary16(0x7BFF);
    /// 2^-14, the smallest positive normal value.
    pub const MIN_POSITIVE_NORMAL: Binary16 = Binary16(0x0400);
    /// 2^-24, the smallest positive subnormal value.
    pub const MIN_POSITIVE_SUBNORMAL: Binary16 = Binary16(0x0001);

    /// Exponent range of normal values.
    pub const MIN_EXP: i32 = -14;
    pub const MAX_EXP: i32 = 15;

    pub const fn from_bits(bits: u16) -> Self {
        Binary16(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    pub fn from_f32(x: f32) -> Self {
        f32_to_f16(x)
    }

    pub fn to_f32(self) -> f32 {
        f16_to_f32(self)
    }

    pub const fn is_nan(self) -> bool {
        self.0 & 0x7C00 == 0x7C00 && self.0 & 0x03FF != 0
    }

    pub const fn is_infinite(self) -> bool {
        self.0 & 0x7FFF == 0x7C00
    }

    pub const fn is_finite(self) -> bool {
        self.0 & 0x7C00 != 0x7C00
    }

    pub const fn is_subnormal(self) -> bool {
        self.0 & 0x7C00 == 0 && self.0 & 0x03FF != 0
    }

    pub const fn is_sign_negative(self) -> bool {
        self.0 & 0x8000 != 0
    }
}

impl fmt::Debug for Binary16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Binary16({:#06x} = {})", self.0, self.to_f32())
    }
}

impl fmt::Display for Binary16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

impl From<Binary16> for f32 {
    fn from(h: Binary16) -> f32 {
        h.to_f32()
    }
}

/// Narrow an `f32` to the nearest binary16 (ties to even).
pub fn f32_to_f16(x: f32) -> Binary16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let man = bits & 0x007F_FFFF;

    if exp == 0xFF {
        if man == 0 {
            return Binary16(sign | 0x7C00);
        }
        // keep the top payload bits, force the quiet bit so the result is never inf
        return Binary16(sign | 0x7E00 | (man >> 13) as u16);
    }

    let e = exp - 127;
    if e > 15 {
        return Binary16(sign | 0x7C00);
    }

    if e >= -14 {
        let mut half_exp = (e + 15) as u32;
        let mut half_man = man >> 13;
        let rest = man & 0x1FFF;
        if rest > 0x1000 || (rest == 0x1000 && half_man & 1 == 1) {
            half_man += 1;
            if half_man == 0x400 {
                half_man = 0;
                half_exp += 1;
                if half_exp >= 31 {
                    return Binary16(sign | 0x7C00);
                }
            }
        }
        return Binary16(sign | (half_exp << 10) as u16 | half_man as u16);
    }

    // below 2^-25 everything rounds to zero; f32 subnormals land here too
    if e < -25 {
        return Binary16(sign);
    }

    // subnormal result: value = m * 2^(e-23), counted in units of 2^-24
    let m = man | 0x0080_0000;
    let shift = (-(e + 1)) as u32; // 14..=24
    let mut half_man = m >> shift;
    let rest = m & ((1 << shift) - 1);
    let halfway = 1u32 << (shift - 1);
    if rest > halfway || (rest == halfway && half_man & 1 == 1) {
        // a carry into bit 10 yields 0x0400, the smallest normal, which is correct
        half_man += 1;
    }
    Binary16(sign | half_man as u16)
}

/// Widen a binary16 to `f32`. Exact for every non-NaN pattern.
pub fn f16_to_f32(h: Binary16) -> f32 {
    let h = h.0 as u32;
    let sign = (h & 0x8000) << 16;
    let exp = (h >> 10) & 0x1F;
    let man = h & 0x03FF;
    match exp {
        0 => {
            let magnitude = man as f32 * f32::from_bits(0x3380_0000); // 2^-24
            if sign != 0 {
                -magnitude
            } else {
                magnitude
            }
        }
        0x1F => f32::from_bits(sign | 0x7F80_0000 | (man << 13)),
        _ => f32::from_bits(sign | ((exp + 112) << 23) | (man << 13)),
    }
}

/// Round an `f32` to the nearest value representable in binary16.
#[inline]
pub fn round_to_f16(x: f32) -> f32 {
    f16_to_f32(f32_to_f16(x))
}

/// Narrow a slice into raw binary16 bits.
pub fn encode_slice(src: &[f32], dst: &mut [u16]) {
    assert_eq!(src.len(), dst.len(), "encode_slice length mismatch");
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("f16c") && std::is_x86_feature_detected!("avx") {
            // SAFETY: the required CPU features were detected above.
            unsafe { f16c::encode(src, dst) };
            return;
        }
    }
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = f32_to_f16(s).0;
    }
}

/// Widen raw binary16 bits into a slice of `f32`.
pub fn decode_slice(src: &[u16], dst: &mut [f32]) {
    assert_eq!(src.len(), dst.len(), "decode_slice length mismatch");
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("f16c") && std::is_x86_feature_detected!("avx") {
            // SAFETY: the required CPU features were detected above.
            unsafe { f16c::decode(src, dst) };
            return;
        }
    }
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = f16_to_f32(Binary16(s));
    }
}

/// Round every element to binary16 precision in place.
pub fn round_slice(values: &mut [f32]) {
    const CHUNK: usize = 1024;
    let mut bits = [0u16; CHUNK];
    for block in values.chunks_mut(CHUNK) {
        let n = block.len();
        encode_slice(block, &mut bits[..n]);
        decode_slice(&bits[..n], block);
    }
}

#[cfg(target_arch = "x86_64")]
mod f16c {
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx,f16c")]
    pub(super) unsafe fn encode(src: &[f32], dst: &mut [u16]) {
        let n = src.len();
        let mut i = 0;
        while i + 8 <= n {
            let v = _mm256_loadu_ps(src.as_ptr().add(i));
            let h = _mm256_cvtps_ph::<_MM_FROUND_TO_NEAREST_INT>(v);
            _mm_storeu_si128(dst.as_mut_ptr().add(i) as *mut __m128i, h);
            i += 8;
        }
        for j in i..n {
            dst[j] = super::f32_to_f16(src[j]).to_bits();
        }
    }

    #[target_feature(enable = "avx,f16c")]
    pub(super) unsafe fn decode(src: &[u16], dst: &mut [f32]) {
        let n = src.len();
        let mut i = 0;
        while i + 8 <= n {
            let h = _mm_loadu_si128(src.as_ptr().add(i) as *const __m128i);
            let v = _mm256_cvtph_ps(h);
            _mm256_storeu_ps(dst.as_mut_ptr().add(i), v);
            i += 8;
        }
        for j in i..n {
            dst[j] = super::f16_to_f32(super::Binary16(src[j]));
        }
    }
}

/// Default static loss scale, 2^12.
pub const DEFAULT_LOSS_SCALE: f32 = 4096.0;

/// Static loss scaling: the loss is multiplied by a constant power of two
/// before backward and gradients are divided by the same constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossScaler {
    scale: f32,
    enabled: bool,
}

impl Default for LossScaler {
    fn default() -> Self {
        LossScaler {
            scale: DEFAULT_LOSS_SCALE,
            enabled: true,
        }
    }
}

impl LossScaler {
    pub fn new(scale: f32) -> Result<Self, HalfError> {
        if !(scale.is_finite() && scale > 0.0) || !is_power_of_two(scale) {
            return Err(HalfError::InvalidScale(scale));
        }
        Ok(LossScaler {
            scale,
            enabled: true,
        })
    }

    pub fn disabled() -> Self {
        LossScaler {
            scale: 1.0,
            enabled: false,
        }
    }

    /// The factor actually applied (1 when disabled).
    pub fn scale(&self) -> f32 {
        if self.enabled {
            self.scale
        } else {
            1.0
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }
}

fn is_power_of_two(x: f32) -> bool {
    let bits = x.to_bits();
    let exp = (bits >> 23) & 0xFF;
    let man = bits & 0x007F_FFFF;
    (exp != 0 && man == 0) || (exp == 0 && man.is_power_of_two())
}

pub fn scale_loss(loss: f32, scaler: &LossScaler) -> f32 {
    loss * scaler.scale()
}

/// Divide every gradient by the loss scale.
///
/// Fails with [`HalfError::OverflowDetected`] on the first non-finite entry,
/// leaving the slice untouched.
pub fn unscale_gradients(grads: &mut [f32], scaler: &LossScaler) -> Result<(), HalfError> {
    if let Some((index, &value)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(HalfError::OverflowDetected { index, value });
    }
    let inv = 1.0 / scaler.scale();
    for g in grads.iter_mut() {
        *g *= inv;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_patterns() {
        assert_eq!(f32_to_f16(1.0).to_bits(), 0x3C00);
        assert_eq!(f32_to_f16(-2.0).to_bits(), 0xC000);
        assert_eq!(f32_to_f16(65504.0), Binary16::MAX);
        assert_eq!(f32_to_f16(65520.0), Binary16::INFINITY);
        assert_eq!(f32_to_f16(65519.99), Binary16::MAX);
        assert_eq!(f32_to_f16(2f32.powi(-24)), Binary16::MIN_POSITIVE_SUBNORMAL);
        assert_eq!(f32_to_f16(2f32.powi(-25)), Binary16::ZERO);
        assert_eq!(f32_to_f16(-(2f32.powi(-25))), Binary16::NEG_ZERO);
        // just above the tie rounds up to the smallest subnormal
        assert_eq!(
            f32_to_f16(f32::from_bits(2f32.powi(-25).to_bits() + 1)),
            Binary16::MIN_POSITIVE_SUBNORMAL
        );
        assert_eq!(f32_to_f16(2f32.powi(-14)), Binary16::MIN_POSITIVE_NORMAL);
        assert_eq!(f32_to_f16(f32::INFINITY), Binary16::INFINITY);
        assert_eq!(f32_to_f16(f32::NEG_INFINITY), Binary16::NEG_INFINITY);
        assert!(f32_to_f16(f32::NAN).is_nan());
        assert!(f32_to_f16(f32::from_bits(0x7F80_0001)).is_nan());
    }

    #[test]
    fn widening() {
        assert_eq!(f16_to_f32(Binary16::from_bits(0x3C00)), 1.0);
        let pz = f16_to_f32(Binary16::from_bits(0x0000));
        let nz = f16_to_f32(Binary16::from_bits(0x8000));
        assert_eq!(pz.to_bits(), 0);
        assert_eq!(nz.to_bits(), 0x8000_0000);
        assert_eq!(f16_to_f32(Binary16::MAX), 65504.0);
        assert_eq!(f16_to_f32(Binary16::MIN_POSITIVE_SUBNORMAL), 2f32.powi(-24));
        assert!(f16_to_f32(Binary16::NAN).is_nan());
    }

    #[test]
    fn every_pattern_round_trips() {
        for bits in 0..=u16::MAX {
            let h = Binary16::from_bits(bits);
            if h.is_nan() {
                assert!(f32_to_f16(f16_to_f32(h)).is_nan());
            } else {
                assert_eq!(f32_to_f16(f16_to_f32(h)), h, "pattern {bits:#06x}");
            }
        }
    }

    #[test]
    fn bulk_matches_scalar_on_all_patterns() {
        let bits: Vec<u16> = (0..=u16::MAX).collect();
        let mut wide = vec![0f32; bits.len()];
        decode_slice(&bits, &mut wide);
        for (&b, &w) in bits.iter().zip(&wide) {
            let s = f16_to_f32(Binary16(b));
            assert!(s.to_bits() == w.to_bits() || (s.is_nan() && w.is_nan()));
        }
        // every f32 near and between binary16 values, including ties
        let mut probes = Vec::new();
        for &w in &wide {
            if w.is_finite() {
                let b = w.to_bits();
                for d in [0u32, 1, 0xFFF, 0x1000, 0x1001] {
                    probes.push(f32::from_bits(b.wrapping_add(d)));
                    probes.push(f32::from_bits(b.wrapping_sub(d)));
                }
            }
        }
        let mut out = vec![0u16; probes.len()];
        encode_slice(&probes, &mut out);
        for (&p, &o) in probes.iter().zip(&out) {
            let s = f32_to_f16(p);
            if s.is_nan() {
                assert!(Binary16(o).is_nan());
            } else {
                assert_eq!(s.to_bits(), o, "probe {p:e}");
            }
        }
    }

    #[test]
    fn loss_scale_contract() {
        let s1 = LossScaler::new(1.0).unwrap();
        assert_eq!(scale_loss(0.5, &s1), 0.5);
        let s = LossScaler::new(4096.0).unwrap();
        assert_eq!(scale_loss(0.5, &s), 2048.0);
        let mut g = vec![2048.0];
        unscale_gradients(&mut g, &s).unwrap();
        assert_eq!(g, vec![0.5]);
        assert_eq!(scale_loss(0.5, &LossScaler::disabled()), 0.5);
        assert_eq!(LossScaler::default().scale(), 4096.0);
    }

    #[test]
    fn overflow_is_reported() {
        let s = LossScaler::default();
        let mut g = vec![1.0, f32::INFINITY, 2.0];
        let err = unscale_gradients(&mut g, &s).unwrap_err();
        assert_eq!(
            err,
            HalfError::OverflowDetected {
                index: 1,
                value: f32::INFINITY
            }
        );
        assert_eq!(g[0], 1.0);
        let mut g = vec![f32::NAN];
        assert!(unscale_gradients(&mut g, &LossScaler::new(2.0).unwrap()).is_err());
    }

    #[test]
    fn scale_must_be_power_of_two() {
        assert!(LossScaler::new(3.0).is_err());
        assert!(LossScaler::new(0.0).is_err());
        assert!(LossScaler::new(-4.0).is_err());
        assert!(LossScaler::new(f32::INFINITY).is_err());
        assert!(LossScaler::new(0.25).is_ok());
        assert!(LossScaler::new(65536.0).is_ok());
    }

    #[test]
    fn round_slice_agrees_with_scalar() {
        let mut v: Vec<f32> = (0..5000).map(|i| (i as f32 - 2500.0) * 0.0137).collect();
        let expect: Vec<f32> = v.iter().map(|&x| round_to_f16(x)).collect();
        round_slice(&mut v);
        assert_eq!(v, expect);
    }
}
