use crate::colorspace::ColorTransform;

/// Affine map of integer symbols onto `[-1, 1]`, plus an optional shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormParams {
    pub bitdepth: u8,
    pub shift: f64,
}

impl NormParams {
    pub fn new(bitdepth: u8) -> Self {
        NormParams { bitdepth, shift: 0.0 }
    }

    /// Parameters for color column `channel`: the largest channel bit depth
    /// of the transform, and its per-channel shift (Y under YCoCg).
    pub fn for_channel(cs: &dyn ColorTransform, channel: usize) -> Self {
        NormParams {
            bitdepth: cs.norm_bitdepth(),
            shift: cs.norm_shift(channel),
        }
    }

    pub fn scale(&self) -> f64 {
        ((1u32 << self.bitdepth) - 1) as f64 / 2.0
    }

    pub fn normalize(&self, x: u16) -> f64 {
        let s = self.scale();
        (x as f64 - s) / s + self.shift
    }

    /// Nearest symbol, clamped to the alphabet.
    pub fn denormalize(&self, v: f64) -> u16 {
        let s = self.scale();
        let max = (1u32 << self.bitdepth) - 1;
        ((v - self.shift) * s + s).round().clamp(0.0, max as f64) as u16
    }
}
