//! Kernel offsets, causal masks and coordinate-hashed kernel maps.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::pcloud::VoxelCoord;

/// Which kernel offsets a convolution may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mask {
    None,
    /// Only offsets strictly before the center in raster order.
    TypeA,
    /// Offsets up to and including the center.
    TypeB,
}

impl Mask {
    pub fn code(self) -> u8 {
        match self {
            Mask::None => 0,
            Mask::TypeA => 1,
            Mask::TypeB => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Mask> {
        match code {
            0 => Some(Mask::None),
            1 => Some(Mask::TypeA),
            2 => Some(Mask::TypeB),
            _ => None,
        }
    }
}

pub(crate) fn check_kernel(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Config(format!("kernel size {k} must be odd")));
    }
    Ok(())
}

/// Offsets `(dx, dy, dz)` of a `k³` kernel in raster order (dx slowest).
pub fn kernel_offsets(k: usize) -> Vec<[i32; 3]> {
    let h = (k / 2) as i32;
    let mut out = Vec::with_capacity(k * k * k);
    for dx in -h..=h {
        for dy in -h..=h {
            for dz in -h..=h {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// Offset indices a mask forces to zero.
pub fn mask_offsets(k: usize, mask: Mask) -> Vec<usize> {
    let vol = k * k * k;
    let center = (vol - 1) / 2;
    match mask {
        Mask::None => Vec::new(),
        Mask::TypeA => (center..vol).collect(),
        Mask::TypeB => (center + 1..vol).collect(),
    }
}

/// Offset indices a mask leaves trainable, ascending.
pub fn allowed_offsets(k: usize, mask: Mask) -> Vec<usize> {
    let vol = k * k * k;
    let center = (vol - 1) / 2;
    match mask {
        Mask::None => (0..vol).collect(),
        Mask::TypeA => (0..center).collect(),
        Mask::TypeB => (0..=center).collect(),
    }
}

const NONE: u32 = u32::MAX;

/// Neighbor table between an input and an output coordinate set.
///
/// Entry `(o, Δ)` holds the input row whose coordinate equals
/// `coord_out[o] + Δ`, if any. Read per offset, this is the list of
/// `(input row, output row)` pairs a sparse convolution touches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelMap {
    k: usize,
    vol: usize,
    n_out: usize,
    table: Vec<u32>,
}

impl KernelMap {
    pub fn build(coords_in: &[VoxelCoord], coords_out: &[VoxelCoord], k: usize) -> Result<Self> {
        check_kernel(k)?;
        let index: HashMap<VoxelCoord, u32> = coords_in
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32))
            .collect();
        let lookup = |p: [i64; 3]| {
            if p.iter().any(|&v| v < 0 || v > u32::MAX as i64) {
                return None;
            }
            index
                .get(&VoxelCoord::new(p[0] as u32, p[1] as u32, p[2] as u32))
                .copied()
        };
        let mut map = KernelMap::empty(coords_out.len(), k)?;
        for (o, &c) in coords_out.iter().enumerate() {
            map.fill_row(o, c, lookup);
        }
        Ok(map)
    }

    /// Same-set map over a dense `d³` grid in raster order, without hashing.
    pub fn dense_grid(d: usize, k: usize) -> Result<Self> {
        check_kernel(k)?;
        let mut map = KernelMap::empty(d * d * d, k)?;
        let di = d as i64;
        for o in 0..d * d * d {
            let c = VoxelCoord::new((o / (d * d)) as u32, ((o / d) % d) as u32, (o % d) as u32);
            map.fill_row(o, c, |p| {
                if p.iter().all(|&v| (0..di).contains(&v)) {
                    Some((p[0] * di * di + p[1] * di + p[2]) as u32)
                } else {
                    None
                }
            });
        }
        Ok(map)
    }

    /// A map with no neighbors; rows are filled later with [`fill_row`](Self::fill_row).
    pub fn empty(n_out: usize, k: usize) -> Result<Self> {
        check_kernel(k)?;
        let vol = k * k * k;
        Ok(KernelMap {
            k,
            vol,
            n_out,
            table: vec![NONE; n_out * vol],
        })
    }

    /// Recomputes the neighbors of output row `o` located at `coord`.
    pub fn fill_row(&mut self, o: usize, coord: VoxelCoord, lookup: impl Fn([i64; 3]) -> Option<u32>) {
        let h = (self.k / 2) as i64;
        let row = &mut self.table[o * self.vol..(o + 1) * self.vol];
        let mut idx = 0;
        for dx in -h..=h {
            for dy in -h..=h {
                for dz in -h..=h {
                    let p = [coord.x as i64 + dx, coord.y as i64 + dy, coord.z as i64 + dz];
                    row[idx] = lookup(p).unwrap_or(NONE);
                    idx += 1;
                }
            }
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn volume(&self) -> usize {
        self.vol
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    #[inline]
    pub fn neighbor(&self, o: usize, offset: usize) -> Option<usize> {
        let v = self.table[o * self.vol + offset];
        (v != NONE).then_some(v as usize)
    }

    /// `(input row, output row)` pairs at one offset, by output row.
    pub fn pairs(&self, offset: usize) -> Vec<(usize, usize)> {
        (0..self.n_out)
            .filter_map(|o| self.neighbor(o, offset).map(|i| (i, o)))
            .collect()
    }
}
