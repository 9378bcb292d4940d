//! Voxelized point cloud data model.
//!
//! Coordinates are ordered x-major, z-fastest everywhere in the crate: a
//! voxel `(x, y, z)` inside a cube of side `d` has raster index
//! `x·d² + y·d + z`, and this is the coding order of the bitstream.

mod ply;

use std::collections::BTreeMap;

pub use ply::{load_ply, read_ply, write_ply, PlyFormat};

use crate::error::{Error, Result};

pub const MIN_BIT_DEPTH: u8 = 3;
pub const MAX_BIT_DEPTH: u8 = 16;

/// Integer voxel position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct VoxelCoord {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl VoxelCoord {
    pub const fn new(x: u32, y: u32, z: u32) -> Self {
        VoxelCoord { x, y, z }
    }

    pub fn to_array(self) -> [u32; 3] {
        [self.x, self.y, self.z]
    }

    pub fn max_component(self) -> u32 {
        self.x.max(self.y).max(self.z)
    }
}

impl From<[u32; 3]> for VoxelCoord {
    fn from(v: [u32; 3]) -> Self {
        VoxelCoord::new(v[0], v[1], v[2])
    }
}

/// Position of `c` in the x-major raster scan of a `d`-cube.
pub fn raster_index(c: VoxelCoord, d: u64) -> Result<u64> {
    let d32 = u32::try_from(d).map_err(|_| Error::Range(format!("cube side {d} too large")))?;
    if c.max_component() >= d32 {
        return Err(Error::Range(format!("{c:?} outside cube of side {d}")));
    }
    Ok(c.x as u64 * d * d + c.y as u64 * d + c.z as u64)
}

/// Inverse of [`raster_index`].
pub fn from_raster_index(index: u64, d: u64) -> VoxelCoord {
    VoxelCoord::new(
        (index / (d * d)) as u32,
        ((index / d) % d) as u32,
        (index % d) as u32,
    )
}

/// Maps a block-local coordinate back onto the `2^n` grid.
pub fn to_global(origin: VoxelCoord, local: VoxelCoord, d: u32, n: u8) -> Result<VoxelCoord> {
    if local.max_component() >= d {
        return Err(Error::Range(format!("local {local:?} not inside block of side {d}")));
    }
    let side = 1u64 << n;
    let g = [
        origin.x as u64 + local.x as u64,
        origin.y as u64 + local.y as u64,
        origin.z as u64 + local.z as u64,
    ];
    if g.iter().any(|&v| v >= side) {
        return Err(Error::Range(format!(
            "{origin:?} + {local:?} overflows a grid of bit depth {n}"
        )));
    }
    Ok(VoxelCoord::new(g[0] as u32, g[1] as u32, g[2] as u32))
}

/// Splits a global coordinate into (block origin, local offset) for block side `d`.
pub fn to_local(global: VoxelCoord, d: u32) -> (VoxelCoord, VoxelCoord) {
    debug_assert!(d.is_power_of_two());
    let mask = d - 1;
    let origin = VoxelCoord::new(global.x & !mask, global.y & !mask, global.z & !mask);
    let local = VoxelCoord::new(global.x & mask, global.y & mask, global.z & mask);
    (origin, local)
}

/// Coordinates with per-point integer attribute rows.
///
/// An empty `bitdepths` list means the cloud carries geometry only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseTensor {
    coords: Vec<VoxelCoord>,
    features: Vec<u16>,
    bitdepths: Vec<u8>,
}

impl SparseTensor {
    pub fn new(coords: Vec<VoxelCoord>, features: Vec<u16>, bitdepths: Vec<u8>) -> Result<Self> {
        let k = bitdepths.len();
        if features.len() != coords.len() * k {
            return Err(Error::Shape(format!(
                "{} feature values for {} points with {} columns",
                features.len(),
                coords.len(),
                k
            )));
        }
        if let Some(w) = coords.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Shape(format!(
                "coordinates not strictly raster ascending at {:?}, {:?}",
                w[0], w[1]
            )));
        }
        for (i, row) in features.chunks(k.max(1)).enumerate().take(coords.len()) {
            for (col, (&v, &bits)) in row.iter().zip(&bitdepths).enumerate() {
                if u32::from(v) >= 1u32 << bits {
                    return Err(Error::Range(format!(
                        "feature {v} at row {i} column {col} exceeds {bits} bits"
                    )));
                }
            }
        }
        Ok(SparseTensor {
            coords,
            features,
            bitdepths,
        })
    }

    pub fn geometry_only(coords: Vec<VoxelCoord>) -> Result<Self> {
        Self::new(coords, Vec::new(), Vec::new())
    }

    /// RGB cloud from coordinates and `[r, g, b]` rows.
    pub fn rgb(coords: Vec<VoxelCoord>, colors: &[[u8; 3]]) -> Result<Self> {
        let features = colors
            .iter()
            .flat_map(|c| c.iter().map(|&v| u16::from(v)))
            .collect();
        Self::new(coords, features, vec![8, 8, 8])
    }

    pub fn empty() -> Self {
        SparseTensor {
            coords: Vec::new(),
            features: Vec::new(),
            bitdepths: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn features(&self) -> &[u16] {
        &self.features
    }

    pub fn bitdepths(&self) -> &[u8] {
        &self.bitdepths
    }

    pub fn num_columns(&self) -> usize {
        self.bitdepths.len()
    }

    pub fn has_color(&self) -> bool {
        !self.bitdepths.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u16] {
        let k = self.bitdepths.len();
        &self.features[i * k..(i + 1) * k]
    }

    /// Column `col` as a contiguous vector.
    pub fn column(&self, col: usize) -> Vec<u16> {
        let k = self.bitdepths.len();
        self.features.iter().skip(col).step_by(k).copied().collect()
    }

    /// Colors as `[r, g, b]` rows; only meaningful for 8-bit three-column clouds.
    pub fn rgb_rows(&self) -> Vec<[u8; 3]> {
        self.features
            .chunks_exact(3)
            .map(|c| [c[0] as u8, c[1] as u8, c[2] as u8])
            .collect()
    }

    /// Keeps rows for which `keep` returns true.
    pub fn filter(&self, mut keep: impl FnMut(usize) -> bool) -> SparseTensor {
        let k = self.bitdepths.len();
        let mut coords = Vec::new();
        let mut features = Vec::new();
        for (i, &c) in self.coords.iter().enumerate() {
            if keep(i) {
                coords.push(c);
                features.extend_from_slice(&self.features[i * k..(i + 1) * k]);
            }
        }
        SparseTensor {
            coords,
            features,
            bitdepths: self.bitdepths.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawPoint {
    pub position: [f64; 3],
    pub color: [u8; 3],
}

/// Point list as read from disk, before quantization.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawPointCloud {
    pub points: Vec<RawPoint>,
    pub has_color: bool,
    pub bit_depth: Option<u8>,
}

impl RawPointCloud {
    pub fn is_geometry_only(&self) -> bool {
        !self.has_color
    }

    /// Per-axis floor of the minimum corner, or zero for an empty cloud.
    pub fn min_corner(&self) -> [i32; 3] {
        if self.points.is_empty() {
            return [0; 3];
        }
        let mut m = [f64::INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                m[a] = m[a].min(p.position[a]);
            }
        }
        m.map(|v| v.floor() as i32)
    }

    /// Smallest bit depth that holds every (shifted) coordinate, at least `floor`.
    pub fn fitting_bit_depth(&self, shift: [i32; 3], floor: u8) -> u8 {
        let max = self
            .points
            .iter()
            .flat_map(|p| (0..3).map(move |a| p.position[a] - shift[a] as f64))
            .fold(0.0f64, f64::max);
        let mut n = floor.max(MIN_BIT_DEPTH);
        while n < MAX_BIT_DEPTH && max.floor() >= (1u64 << n) as f64 {
            n += 1;
        }
        n
    }
}

/// Quantizes to the `2^n` grid, merging duplicate voxels.
pub fn voxelize(pc: &RawPointCloud, n: u8) -> Result<SparseTensor> {
    voxelize_with_shift(pc, n, [0; 3])
}

/// Like [`voxelize`], but subtracts the floored minimum corner first.
/// Returns the shift so positions can be restored.
pub fn voxelize_shifted(pc: &RawPointCloud, n: u8) -> Result<(SparseTensor, [i32; 3])> {
    let shift = pc.min_corner();
    Ok((voxelize_with_shift(pc, n, shift)?, shift))
}

pub fn voxelize_with_shift(pc: &RawPointCloud, n: u8, shift: [i32; 3]) -> Result<SparseTensor> {
    if !(MIN_BIT_DEPTH..=MAX_BIT_DEPTH).contains(&n) {
        return Err(Error::Config(format!(
            "bit depth {n} outside [{MIN_BIT_DEPTH}, {MAX_BIT_DEPTH}]"
        )));
    }
    let side = (1u64 << n) as f64;
    // Accumulated color sums and contribution count per voxel.
    let mut cells: BTreeMap<VoxelCoord, ([u32; 3], u32)> = BTreeMap::new();
    for (i, p) in pc.points.iter().enumerate() {
        let mut q = [0u32; 3];
        for a in 0..3 {
            let v = (p.position[a] - shift[a] as f64).floor();
            if !(0.0..side).contains(&v) {
                return Err(Error::Range(format!(
                    "point {i} at {:?} quantizes outside [0, 2^{n})",
                    p.position
                )));
            }
            q[a] = v as u32;
        }
        let cell = cells.entry(q.into()).or_insert(([0; 3], 0));
        for a in 0..3 {
            cell.0[a] += u32::from(p.color[a]);
        }
        cell.1 += 1;
    }
    let coords: Vec<VoxelCoord> = cells.keys().copied().collect();
    if !pc.has_color {
        return SparseTensor::geometry_only(coords);
    }
    let colors: Vec<[u8; 3]> = cells
        .values()
        .map(|(sum, count)| sum.map(|s| ((2 * s + count) / (2 * count)) as u8))
        .collect();
    SparseTensor::rgb(coords, &colors)
}

impl From<&SparseTensor> for RawPointCloud {
    fn from(t: &SparseTensor) -> Self {
        let has_color = t.num_columns() == 3;
        let points = t
            .coords()
            .iter()
            .enumerate()
            .map(|(i, c)| RawPoint {
                position: [c.x as f64, c.y as f64, c.z as f64],
                color: if has_color {
                    let r = t.row(i);
                    [r[0] as u8, r[1] as u8, r[2] as u8]
                } else {
                    [0; 3]
                },
            })
            .collect();
        RawPointCloud {
            points,
            has_color,
            bit_depth: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn point(p: [f64; 3], c: [u8; 3]) -> RawPoint {
        RawPoint {
            position: p,
            color: c,
        }
    }

    fn cloud(points: Vec<RawPoint>) -> RawPointCloud {
        RawPointCloud {
            points,
            has_color: true,
            bit_depth: None,
        }
    }

    #[test]
    fn raster_index_examples() {
        assert_eq!(raster_index(VoxelCoord::new(0, 0, 0), 4).unwrap(), 0);
        assert_eq!(raster_index(VoxelCoord::new(0, 0, 3), 4).unwrap(), 3);
        assert_eq!(raster_index(VoxelCoord::new(1, 2, 3), 4).unwrap(), 27);
        assert!(matches!(
            raster_index(VoxelCoord::new(0, 4, 0), 4),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn raster_index_enumerates_nested_loops() {
        for d in [1u32, 2, 4, 5] {
            let mut expected = 0u64;
            for x in 0..d {
                for y in 0..d {
                    for z in 0..d {
                        let c = VoxelCoord::new(x, y, z);
                        assert_eq!(raster_index(c, d as u64).unwrap(), expected);
                        assert_eq!(from_raster_index(expected, d as u64), c);
                        expected += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn global_local_round_trip() {
        assert_eq!(
            to_global(VoxelCoord::new(64, 0, 0), VoxelCoord::new(1, 2, 3), 64, 10).unwrap(),
            VoxelCoord::new(65, 2, 3)
        );
        let c = VoxelCoord::new(5, 6, 7);
        assert_eq!(to_global(VoxelCoord::default(), c, 64, 10).unwrap(), c);
        assert!(to_global(VoxelCoord::new(960, 0, 0), VoxelCoord::new(63, 0, 0), 64, 9).is_err());
        assert!(to_global(VoxelCoord::default(), VoxelCoord::new(64, 0, 0), 64, 10).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let g = VoxelCoord::new(
                rng.gen_range(0..1024),
                rng.gen_range(0..1024),
                rng.gen_range(0..1024),
            );
            let (origin, local) = to_local(g, 64);
            assert_eq!(to_global(origin, local, 64, 10).unwrap(), g);
        }
    }

    #[test]
    fn voxelize_single_point() {
        let t = voxelize(&cloud(vec![point([0.0; 3], [10, 20, 30])]), 10).unwrap();
        assert_eq!(t.coords(), &[VoxelCoord::new(0, 0, 0)]);
        assert_eq!(t.features(), &[10, 20, 30]);
    }

    #[test]
    fn voxelize_merges_with_round_half_up() {
        let pc = cloud(vec![
            point([3.2, 1.0, 1.0], [10, 10, 10]),
            point([3.7, 1.5, 1.9], [11, 11, 11]),
        ]);
        let t = voxelize(&pc, 10).unwrap();
        assert_eq!(t.len(), 1);
        // mean 10.5 rounds up
        assert_eq!(t.features(), &[11, 11, 11]);

        let pc = cloud(vec![
            point([0.0; 3], [0, 1, 255]),
            point([0.0; 3], [1, 1, 255]),
            point([0.0; 3], [1, 2, 254]),
        ]);
        // means 2/3, 4/3, 764/3 -> 1, 1, 255
        assert_eq!(voxelize(&pc, 4).unwrap().features(), &[1, 1, 255]);
    }

    #[test]
    fn voxelize_sorts_raster_ascending() {
        let pc = cloud(vec![
            point([1.0, 0.0, 0.0], [1, 1, 1]),
            point([0.0, 0.0, 1.0], [2, 2, 2]),
            point([0.0, 1.0, 0.0], [3, 3, 3]),
            point([0.0, 0.0, 0.0], [4, 4, 4]),
        ]);
        let t = voxelize(&pc, 3).unwrap();
        let idx: Vec<u64> = t
            .coords()
            .iter()
            .map(|&c| raster_index(c, 8).unwrap())
            .collect();
        assert_eq!(idx, vec![0, 1, 8, 64]);
        assert_eq!(t.features(), &[4, 4, 4, 2, 2, 2, 3, 3, 3, 1, 1, 1]);
    }

    #[test]
    fn voxelize_range_and_depth_errors() {
        let pc = cloud(vec![point([8.0, 0.0, 0.0], [0; 3])]);
        assert!(matches!(voxelize(&pc, 3), Err(Error::Range(_))));
        let pc = cloud(vec![point([-0.5, 0.0, 0.0], [0; 3])]);
        assert!(matches!(voxelize(&pc, 3), Err(Error::Range(_))));
        assert!(matches!(voxelize(&pc, 2), Err(Error::Config(_))));
        assert!(matches!(voxelize(&pc, 17), Err(Error::Config(_))));
    }

    #[test]
    fn voxelize_shifted_moves_min_corner_to_origin() {
        let pc = cloud(vec![
            point([100.5, -3.0, 7.0], [1, 2, 3]),
            point([101.0, -2.0, 9.0], [4, 5, 6]),
        ]);
        let (t, shift) = voxelize_shifted(&pc, 4).unwrap();
        assert_eq!(shift, [100, -3, 7]);
        assert_eq!(t.coords(), &[VoxelCoord::new(0, 0, 0), VoxelCoord::new(1, 1, 2)]);
    }

    #[test]
    fn sparse_tensor_rejects_bad_rows() {
        let c = vec![VoxelCoord::new(0, 0, 1), VoxelCoord::new(0, 0, 0)];
        assert!(SparseTensor::geometry_only(c).is_err());
        let c = vec![VoxelCoord::new(0, 0, 0)];
        assert!(SparseTensor::new(c.clone(), vec![1, 2], vec![8, 8, 8]).is_err());
        assert!(SparseTensor::new(c, vec![256], vec![8]).is_err());
    }

    #[test]
    fn fitting_bit_depth_covers_extent() {
        let pc = cloud(vec![point([1023.9, 0.0, 0.0], [0; 3])]);
        assert_eq!(pc.fitting_bit_depth([0; 3], 3), 10);
        let pc = cloud(vec![point([1024.0, 0.0, 0.0], [0; 3])]);
        assert_eq!(pc.fitting_bit_depth([0; 3], 3), 11);
        assert_eq!(RawPointCloud::default().fitting_bit_depth([0; 3], 6), 6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_cloud() -> impl Strategy<Value = RawPointCloud> {
            prop::collection::vec(
                ([0.0f64..32.0, 0.0f64..32.0, 0.0f64..32.0], any::<[u8; 3]>()),
                0..80,
            )
            .prop_map(|pts| {
                cloud(
                    pts.into_iter()
                        .map(|(p, c)| point(p, c))
                        .collect(),
                )
            })
        }

        proptest! {
            #[test]
            fn voxelize_is_sorted_unique_and_idempotent(pc in arb_cloud()) {
                let t = voxelize(&pc, 5).unwrap();
                prop_assert!(t.coords().windows(2).all(|w| w[0] < w[1]));
                let again = voxelize(&RawPointCloud::from(&t), 5).unwrap();
                prop_assert_eq!(again, t);
            }
        }
    }
}
