//! Color transforms applied before coding, selectable by name.
//!
//! Every transform maps an RGB triple to three non-negative channel symbols
//! and back without loss. The bitstream stores the transform's `id`.

use crate::error::{Error, Result};

pub trait ColorTransform: Send + Sync {
    fn name(&self) -> &'static str;

    /// Identifier written into the bitstream flags.
    fn id(&self) -> u8;

    /// Bit depth of each coded channel, in coding order.
    fn bitdepths(&self) -> [u8; 3];

    fn channel_names(&self) -> [&'static str; 3];

    fn forward(&self, rgb: [u8; 3]) -> [u16; 3];

    fn inverse(&self, symbols: [u16; 3]) -> Result<[u8; 3]>;

    /// Largest channel bit depth; used for input normalization.
    fn norm_bitdepth(&self) -> u8 {
        self.bitdepths().into_iter().max().unwrap_or(8)
    }

    /// Extra offset added to a channel after normalization.
    fn norm_shift(&self, _channel: usize) -> f64 {
        0.0
    }

    fn alphabets(&self) -> [usize; 3] {
        self.bitdepths().map(|b| 1usize << b)
    }
}

pub struct Rgb;

impl ColorTransform for Rgb {
    fn name(&self) -> &'static str {
        "rgb"
    }

    fn id(&self) -> u8 {
        0
    }

    fn bitdepths(&self) -> [u8; 3] {
        [8, 8, 8]
    }

    fn channel_names(&self) -> [&'static str; 3] {
        ["r", "g", "b"]
    }

    fn forward(&self, rgb: [u8; 3]) -> [u16; 3] {
        rgb.map(u16::from)
    }

    fn inverse(&self, s: [u16; 3]) -> Result<[u8; 3]> {
        if s.iter().any(|&v| v > 255) {
            return Err(Error::Range(format!("RGB symbol out of range: {s:?}")));
        }
        Ok(s.map(|v| v as u8))
    }
}

/// Reversible YCoCg (lifting form). Chroma is stored offset-binary (+256).
pub struct YCoCg;

pub const CHROMA_OFFSET: i32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct YCoCgTriple {
    pub y: u16,
    pub co: u16,
    pub cg: u16,
}

pub fn rgb_to_ycocg(r: u8, g: u8, b: u8) -> YCoCgTriple {
    let (r, g, b) = (r as i32, g as i32, b as i32);
    let co = r - b;
    let t = b + (co >> 1);
    let cg = g - t;
    let y = t + (cg >> 1);
    YCoCgTriple {
        y: y as u16,
        co: (co + CHROMA_OFFSET) as u16,
        cg: (cg + CHROMA_OFFSET) as u16,
    }
}

pub fn ycocg_to_rgb(t: YCoCgTriple) -> Result<(u8, u8, u8)> {
    if t.y > 255 || t.co > 511 || t.cg > 511 {
        return Err(Error::Range(format!("{t:?} outside 8/9/9-bit ranges")));
    }
    let co = t.co as i32 - CHROMA_OFFSET;
    let cg = t.cg as i32 - CHROMA_OFFSET;
    let tmp = t.y as i32 - (cg >> 1);
    let g = cg + tmp;
    let b = tmp - (co >> 1);
    let r = b + co;
    let ok = |v: i32| (0..256).contains(&v);
    if !(ok(r) && ok(g) && ok(b)) {
        return Err(Error::Range(format!("{t:?} is not the image of an RGB triple")));
    }
    Ok((r as u8, g as u8, b as u8))
}

impl ColorTransform for YCoCg {
    fn name(&self) -> &'static str {
        "ycocg"
    }

    fn id(&self) -> u8 {
        1
    }

    fn bitdepths(&self) -> [u8; 3] {
        [8, 9, 9]
    }

    fn channel_names(&self) -> [&'static str; 3] {
        ["y", "co", "cg"]
    }

    fn forward(&self, [r, g, b]: [u8; 3]) -> [u16; 3] {
        let t = rgb_to_ycocg(r, g, b);
        [t.y, t.co, t.cg]
    }

    fn inverse(&self, [y, co, cg]: [u16; 3]) -> Result<[u8; 3]> {
        let (r, g, b) = ycocg_to_rgb(YCoCgTriple { y, co, cg })?;
        Ok([r, g, b])
    }

    /// Luma lands in `[-1, 0]` under 9-bit normalization; recenter it.
    fn norm_shift(&self, channel: usize) -> f64 {
        if channel == 0 {
            0.5
        } else {
            0.0
        }
    }
}

static RGB: Rgb = Rgb;
static YCOCG: YCoCg = YCoCg;

/// All registered transforms.
pub fn registry() -> [&'static dyn ColorTransform; 2] {
    [&RGB, &YCOCG]
}

pub fn by_name(name: &str) -> Result<&'static dyn ColorTransform> {
    registry()
        .into_iter()
        .find(|t| t.name().eq_ignore_ascii_case(name))
        .ok_or_else(|| {
            let known: Vec<_> = registry().iter().map(|t| t.name()).collect();
            Error::Config(format!("unknown colorspace '{name}' (known: {})", known.join(", ")))
        })
}

pub fn by_id(id: u8) -> Result<&'static dyn ColorTransform> {
    registry()
        .into_iter()
        .find(|t| t.id() == id)
        .ok_or_else(|| Error::Decode(format!("unknown colorspace id {id}")))
}

/// Counts RGB triples that fail to round-trip through YCoCg. Zero is the only
/// acceptable answer.
pub fn exhaustive_ycocg_mismatches() -> u64 {
    let mut bad = 0;
    for r in 0..=255u8 {
        for g in 0..=255u8 {
            for b in 0..=255u8 {
                if ycocg_to_rgb(rgb_to_ycocg(r, g, b)).ok() != Some((r, g, b)) {
                    bad += 1;
                }
            }
        }
    }
    bad
}
