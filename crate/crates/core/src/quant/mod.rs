//! Post-training int8 quantization.
//!
//! Weights are quantized symmetrically per output channel, activations
//! asymmetrically per tensor from calibrated min/max ranges, biases to int32
//! at the accumulator scale. Every rescale in the integer network is a 31-bit
//! fixed-point multiplier plus a right shift, rounded half away from zero.

mod calibrate;
mod fold;
mod network;

pub use calibrate::{calibrate, calibrate_images, CalibRange, CalibRanges};
pub use fold::fold_batchnorm;
pub use network::{quantize_model, QAdd, QBlock, QConv, QOp, QTraceEvent, QuantizedModel};

use crate::error::{Error, Result};

/// Rounds to nearest, ties away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Affine int8 mapping `real = scale * (q - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QParams {
    pub scale: f32,
    pub zero_point: i8,
}

impl QParams {
    /// Asymmetric parameters covering `[min, max]` (which must span 0):
    /// `scale = (max - min) / 255`, `zero_point = round(-min / scale) - 128`.
    pub fn from_range(min: f32, max: f32) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min > 0.0 || max < 0.0 {
            return Err(Error::invalid(format!("range [{min}, {max}] must be finite and contain 0")));
        }
        if max == min {
            return Err(Error::invalid("zero-width range"));
        }
        let scale = (max - min) / 255.0;
        let zp = round_half_away(-(min as f64) / scale as f64) - 128.0;
        Ok(QParams { scale, zero_point: zp.clamp(-128.0, 127.0) as i8 })
    }

    #[inline]
    pub fn quantize(&self, x: f32) -> i8 {
        let q = round_half_away(x as f64 / self.scale as f64) + self.zero_point as f64;
        q.clamp(-128.0, 127.0) as i8
    }

    #[inline]
    pub fn dequantize(&self, q: i8) -> f32 {
        self.scale * (q as i32 - self.zero_point as i32) as f32
    }

    /// The real interval exactly representable by this mapping.
    pub fn representable(&self) -> (f32, f32) {
        (self.dequantize(-128), self.dequantize(127))
    }
}

/// Symmetric per-channel weight scale `max|w| / 127`; an all-zero channel gets 1/127.
pub fn symmetric_scale(values: &[f32]) -> f32 {
    let m = values.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
    if m > 0.0 {
        m / 127.0
    } else {
        1.0 / 127.0
    }
}

#[inline]
pub fn quantize_symmetric(x: f32, scale: f32) -> i8 {
    round_half_away(x as f64 / scale as f64).clamp(-127.0, 127.0) as i8
}

/// Fixed-point encoding of a positive real multiplier:
/// `real ≈ multiplier * 2^(-31 - shift)` with `multiplier ∈ [2^30, 2^31)`.
///
/// `shift` is negative for multipliers of 1 or more (down to -31).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requant {
    pub multiplier: i32,
    pub shift: i32,
}

impl Requant {
    pub const MIN_SHIFT: i32 = -31;
    pub const MAX_SHIFT: i32 = 63;

    pub fn from_real(real: f64) -> Result<Self> {
        if !(real.is_finite() && real > 0.0) {
            return Err(Error::invalid(format!("requantization scale {real} must be positive and finite")));
        }
        // real = frac * 2^exp, frac in [0.5, 1)
        let mut exp = real.log2().floor() as i32 + 1;
        let mut frac = real / 2f64.powi(exp);
        if frac >= 1.0 {
            frac /= 2.0;
            exp += 1;
        } else if frac < 0.5 {
            frac *= 2.0;
            exp -= 1;
        }
        let mut m = (frac * (1u64 << 31) as f64).round() as i64;
        if m == 1i64 << 31 {
            m = 1 << 30;
            exp += 1;
        }
        let shift = -exp;
        if !(Self::MIN_SHIFT..=Self::MAX_SHIFT).contains(&shift) {
            return Err(Error::invalid(format!("requantization scale {real} outside the encodable range")));
        }
        Ok(Requant { multiplier: m as i32, shift })
    }

    pub fn validate(&self) -> Result<()> {
        if !(1 << 30..=i32::MAX).contains(&self.multiplier) || !(Self::MIN_SHIFT..=Self::MAX_SHIFT).contains(&self.shift) {
            return Err(Error::Format(format!("invalid requantization pair ({}, {})", self.multiplier, self.shift)));
        }
        Ok(())
    }

    pub fn to_real(&self) -> f64 {
        self.multiplier as f64 * 2f64.powi(-31 - self.shift)
    }

    /// `round(value * real)` in pure integer arithmetic.
    #[inline]
    pub fn scale(&self, value: i64) -> i64 {
        rshift_round(value as i128 * self.multiplier as i128, (31 + self.shift) as u32) as i64
    }
}

/// Arithmetic right shift by `s` bits, rounding half away from zero.
#[inline]
pub fn rshift_round(v: i128, s: u32) -> i128 {
    if s == 0 {
        return v;
    }
    if s >= 127 {
        return 0;
    }
    let half = 1i128 << (s - 1);
    if v >= 0 {
        (v + half) >> s
    } else {
        -((-v + half) >> s)
    }
}

/// Rescales an int32 accumulator into the int8 output domain:
/// `clamp(round(acc * multiplier * 2^(-31-shift)) + out_zero, -128, 127)`.
#[inline]
pub fn requantize(acc: i32, multiplier: i32, shift: i32, out_zero: i8) -> i8 {
    let r = Requant { multiplier, shift };
    (r.scale(acc as i64) + out_zero as i64).clamp(-128, 127) as i8
}
