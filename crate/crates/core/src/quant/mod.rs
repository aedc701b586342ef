//! Weight quantization primitives.
//!
//! Normal (non-cherry) weights use full-range symmetric MinMax quantization:
//!
//! ```text
//! S      = max|x| / 2^(k-1)
//! code   = round(clip(x / S, -2^(k-1) + eps, 2^(k-1) - eps) - 0.5)
//! x_hat  = S * (code + 0.5)
//! ```
//!
//! `round` is round-half-away-from-zero, so the grid `{S(n + 0.5)}` is
//! symmetric about zero and the quantizer is odd on tie-free inputs. Groups of
//! `group_size` consecutive elements within a row each get their own `S`.
//!
//! The asymmetric min-max quantizer is only used inside the 2-bit per-column
//! scale search.

mod asymmetric;
mod bits;
mod grouped;
mod pack;
mod symmetric;

pub use asymmetric::{dequantize_asymmetric, fake_quant_asymmetric, fake_quant_asymmetric_grouped, quantize_asymmetric};
pub use bits::avg_bits;
pub use grouped::{quantize_grouped, GroupedQuant};
pub use pack::{pack_codes, unpack_codes, PackedBlob, LAYOUT_LSB_STREAM};
pub use symmetric::{
    code_range, dequantize, fake_quant, fake_quant_with_scale, quantize_symmetric, quantize_with_scale,
    symmetric_scale,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quantization settings shared by selection, training and storage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    /// Code width `k` for normal weights, 2..=4.
    pub bits: u8,
    /// Consecutive elements per row sharing one scale.
    pub group_size: usize,
    pub clip_eps: f64,
    /// Fraction of columns kept at 16 bits. Zero disables cherry handling
    /// entirely (plain QAT).
    pub cherry_fraction: f64,
    /// Per-column scale search `Q(w * s) / s` (used for 2-bit by default).
    pub scale_trick: bool,
    pub scale_grid_points: usize,
}

/// 3-bit, groups of 128, one cherry column in 256.
impl Default for QuantConfig {
    fn default() -> Self {
        Self::new(3, 128)
    }
}

impl QuantConfig {
    pub fn new(bits: u8, group_size: usize) -> Self {
        Self {
            bits,
            group_size,
            clip_eps: 0.01,
            cherry_fraction: 1.0 / 256.0,
            scale_trick: bits == 2,
            scale_grid_points: 20,
        }
    }

    pub fn with_cherry_fraction(mut self, f: f64) -> Self {
        self.cherry_fraction = f;
        self
    }

    pub fn with_scale_trick(mut self, on: bool) -> Self {
        self.scale_trick = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.bits) {
            return Err(Error::config(format!("bits must be 2, 3 or 4, got {}", self.bits)));
        }
        if self.group_size == 0 {
            return Err(Error::config("group_size must be positive"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 0.5) {
            return Err(Error::config(format!("clip_eps must be in (0, 0.5), got {}", self.clip_eps)));
        }
        if !(self.cherry_fraction >= 0.0 && self.cherry_fraction < 1.0) {
            return Err(Error::config(format!(
                "cherry_fraction must be in [0, 1), got {}",
                self.cherry_fraction
            )));
        }
        if self.scale_grid_points == 0 {
            return Err(Error::config("scale_grid_points must be positive"));
        }
        Ok(())
    }

    /// Number of cherry columns for a matrix with `cols` columns:
    /// `max(1, round(cols * fraction))`, or zero when the fraction is zero.
    pub fn cherry_count(&self, cols: usize) -> usize {
        if self.cherry_fraction == 0.0 {
            0
        } else {
            ((cols as f64 * self.cherry_fraction).round() as usize).max(1)
        }
    }
}

/// Round-half-away-from-zero.
#[inline]
pub fn round_half_away(x: f32) -> f32 {
    x.round()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_bit_width() {
        let c = QuantConfig::new(2, 128);
        assert!(c.scale_trick);
        assert_eq!(c.clip_eps, 0.01);
        assert!(!QuantConfig::new(3, 128).scale_trick);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn validation_rejects_out_of_range() {
        assert!(QuantConfig::new(5, 128).validate().is_err());
        assert!(QuantConfig::new(3, 0).validate().is_err());
        assert!(QuantConfig::new(3, 64).with_cherry_fraction(1.0).validate().is_err());
        assert!(QuantConfig::new(3, 64).with_cherry_fraction(0.0).validate().is_ok());
    }

    #[test]
    fn cherry_count_rule() {
        let c = QuantConfig::new(3, 128);
        assert_eq!(c.cherry_count(4096), 16);
        assert_eq!(c.cherry_count(8), 1);
        assert_eq!(c.with_cherry_fraction(0.0).cherry_count(4096), 0);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_half_away(1.5), 2.0);
        assert_eq!(round_half_away(-1.5), -2.0);
        assert_eq!(round_half_away(-0.5), -1.0);
        assert_eq!(round_half_away(2.49), 2.0);
    }
}
