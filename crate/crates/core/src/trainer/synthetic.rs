//! Synthetic voxel surfaces with smooth color gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::pcloud::{SparseTensor, VoxelCoord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Plane,
    Sphere,
    /// Height field with low-frequency waves and per-column jitter.
    NoisySurface,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Plane, Shape::Sphere, Shape::NoisySurface];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Plane => "plane",
            Shape::Sphere => "sphere",
            Shape::NoisySurface => "noisy-surface",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown shape {name:?}")))
    }
}

/// Affine color field per channel, evaluated at voxel centers.
#[derive(Debug, Clone, Copy)]
struct Gradient {
    base: [f64; 3],
    slope: [[f64; 3]; 3],
}

impl Gradient {
    fn random(side: u32, rng: &mut impl Rng) -> Self {
        let s = side as f64;
        let mut base = [0.0; 3];
        let mut slope = [[0.0; 3]; 3];
        for c in 0..3 {
            base[c] = rng.gen_range(40.0..215.0);
            for a in 0..3 {
                slope[c][a] = rng.gen_range(-60.0..60.0) / s;
            }
        }
        Gradient { base, slope }
    }

    fn at(&self, p: VoxelCoord, center: f64) -> [u8; 3] {
        let q = [p.x as f64 - center, p.y as f64 - center, p.z as f64 - center];
        let mut out = [0u8; 3];
        for c in 0..3 {
            let v = self.base[c] + (0..3).map(|a| self.slope[c][a] * q[a]).sum::<f64>();
            out[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        out
    }
}

/// One surface inside a `side³` grid, colored with a smooth gradient.
/// Never empty: a degenerate draw falls back to the center voxel.
pub fn generate(shape: Shape, side: u32, rng: &mut impl Rng) -> SparseTensor {
    let s = side as f64;
    let c = (s - 1.0) / 2.0;
    let mut coords = Vec::new();
    match shape {
        Shape::Plane => {
            let mut n = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.2..1.0)];
            let len = n.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
            n.iter_mut().for_each(|v| *v /= len);
            let off = rng.gen_range(-0.2..0.2) * s;
            for_each_voxel(side, |p, q| {
                if (q[0] * n[0] + q[1] * n[1] + q[2] * n[2] - off).abs() < 0.5 {
                    coords.push(p);
                }
            });
        }
        Shape::Sphere => {
            let r = rng.gen_range(0.25..0.45) * s;
            let ctr = [rng.gen_range(-0.1..0.1) * s, rng.gen_range(-0.1..0.1) * s, rng.gen_range(-0.1..0.1) * s];
            for_each_voxel(side, |p, q| {
                let dist = ((q[0] - ctr[0]).powi(2) + (q[1] - ctr[1]).powi(2) + (q[2] - ctr[2]).powi(2)).sqrt();
                if (dist - r).abs() < 0.5 {
                    coords.push(p);
                }
            });
        }
        Shape::NoisySurface => {
            let tilt = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
            let amp = rng.gen_range(0.05..0.15) * s;
            let freq = rng.gen_range(1.0..2.5) * std::f64::consts::TAU / s;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for x in 0..side {
                for y in 0..side {
                    let (qx, qy) = (x as f64 - c, y as f64 - c);
                    let h = c + tilt[0] * qx + tilt[1] * qy + amp * (freq * qx + phase).sin() * (freq * qy).cos()
                        + rng.gen_range(-0.7..0.7);
                    let z = h.round();
                    if (0.0..s).contains(&z) {
                        coords.push(VoxelCoord::new(x, y, z as u32));
                    }
                }
            }
        }
    }
    if coords.is_empty() {
        let m = side / 2;
        coords.push(VoxelCoord::new(m, m, m));
    }
    coords.sort();
    let g = Gradient::random(side, rng);
    let colors: Vec<[u8; 3]> = coords.iter().map(|&p| g.at(p, c)).collect();
    SparseTensor::rgb(coords, &colors).expect("sorted unique in-range voxels")
}

fn for_each_voxel(side: u32, mut f: impl FnMut(VoxelCoord, [f64; 3])) {
    let c = (side as f64 - 1.0) / 2.0;
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                f(VoxelCoord::new(x, y, z), [x as f64 - c, y as f64 - c, z as f64 - c]);
            }
        }
    }
}

/// A mix of shapes, one per draw.
pub fn dataset(count: usize, side: u32, rng: &mut impl Rng) -> Vec<SparseTensor> {
    (0..count)
        .map(|i| generate(Shape::ALL[i % Shape::ALL.len()], side, rng))
        .collect()
}
