use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use super::{init_network, probs_of, FeatureLoss, ModelConfig};
use crate::error::{Error, Result};
use crate::pcloud::{raster_index, from_raster_index, VoxelCoord};
use crate::sparsenn::{accuracy, softmax, softmax_ce_rows, Activations, GraphBuilder, KernelMap, Mask, Network};

const NONE: u32 = u32::MAX;

/// Kernel maps over the full `d³` grid, shared by every block of side `d`.
#[derive(Debug)]
pub struct GridMaps {
    pub d: usize,
    pub k3: KernelMap,
    pub k1: KernelMap,
}

/// Cached grid maps for block side `d`.
pub fn grid_maps(d: usize) -> Result<Arc<GridMaps>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GridMaps>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(g) = cache.lock().expect("grid cache").get(&d) {
        return Ok(g.clone());
    }
    let g = Arc::new(GridMaps {
        d,
        k3: KernelMap::dense_grid(d, 3)?,
        k1: KernelMap::dense_grid(d, 1)?,
    });
    cache.lock().expect("grid cache").entry(d).or_insert(g.clone());
    Ok(g)
}

fn dense_index(coords: &[VoxelCoord], d: usize) -> Result<Vec<u32>> {
    let mut index = vec![NONE; d * d * d];
    for (i, &c) in coords.iter().enumerate() {
        index[raster_index(c, d as u64)? as usize] = i as u32;
    }
    Ok(index)
}

fn lookup(index: &[u32], d: usize) -> impl Fn([i64; 3]) -> Option<u32> + '_ {
    let di = d as i64;
    move |p| {
        if p.iter().all(|&v| (0..di).contains(&v)) {
            let v = index[(p[0] * di * di + p[1] * di + p[2]) as usize];
            (v != NONE).then_some(v)
        } else {
            None
        }
    }
}

/// Map from occupied voxels to every grid voxel.
pub fn occupancy_input_map(coords: &[VoxelCoord], d: usize, k: usize) -> Result<KernelMap> {
    let index = dense_index(coords, d)?;
    let mut map = KernelMap::empty(d * d * d, k)?;
    let look = lookup(&index, d);
    for o in 0..d * d * d {
        map.fill_row(o, from_raster_index(o as u64, d as u64), &look);
    }
    Ok(map)
}

pub(crate) fn occupancy_targets(coords: &[VoxelCoord], d: usize) -> Result<Vec<usize>> {
    let mut t = vec![0; d * d * d];
    for &c in coords {
        t[raster_index(c, d as u64)? as usize] = 1;
    }
    Ok(t)
}

/// Occupancy model: a type-A first layer evaluated at all `d³` voxels,
/// type-B residual blocks, a dense scatter and a `k = 1` two-way head.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyModel {
    pub cfg: ModelConfig,
    pub net: Network,
}

impl OccupancyModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = GraphBuilder::new();
        let x = b.input(1, true);
        let mut h = b.conv_elu(x, cfg.k_first, cfg.channels, Mask::TypeA, 0)?;
        for _ in 0..cfg.o_res_blocks {
            h = b.residual(h, Mask::TypeB, 2, 1)?;
        }
        let h = b.to_dense(h, 2);
        let out = b.conv(h, 1, 2, Mask::TypeB, 2)?;
        Ok(OccupancyModel { cfg, net: b.finish(out) })
    }

    pub fn init(&mut self, seed: u64) {
        init_network(&mut self.net, seed);
    }

    fn check(&self, coords: &[VoxelCoord]) -> Result<()> {
        let d = self.cfg.d as u32;
        if let Some(c) = coords.iter().find(|c| c.max_component() >= d) {
            return Err(Error::Range(format!("{c:?} outside block of side {d}")));
        }
        Ok(())
    }

    fn run(&self, coords: &[VoxelCoord]) -> Result<(Activations, Vec<f64>, KernelMap, Arc<GridMaps>)> {
        self.check(coords)?;
        let grid = grid_maps(self.cfg.d)?;
        let input = occupancy_input_map(coords, self.cfg.d, self.cfg.k_first)?;
        let ones = vec![1.0; coords.len()];
        let act = self.net.forward(&[&ones], &[&input, &grid.k3, &grid.k1])?;
        Ok((act, ones, input, grid))
    }

    /// `d³ × 2` logits, raster order.
    pub fn logits(&self, coords: &[VoxelCoord]) -> Result<Vec<f64>> {
        let (mut act, ..) = self.run(coords)?;
        Ok(std::mem::take(&mut act.values[self.net.output()]))
    }

    /// `d³ × 2` probabilities: row i is `p(f⁰_i | f⁰_<i)` as `[empty, occupied]`.
    pub fn forward(&self, coords: &[VoxelCoord]) -> Result<Vec<f64>> {
        Ok(probs_of(&self.logits(coords)?, 2))
    }

    /// Forward and backward over one block; gradients accumulate in the parameters.
    pub fn accumulate(&mut self, coords: &[VoxelCoord]) -> Result<FeatureLoss> {
        let (act, ones, input, grid) = self.run(coords)?;
        let targets = occupancy_targets(coords, self.cfg.d)?;
        let logits = &act.values[self.net.output()];
        let (bits, grad) = softmax_ce_rows(logits, 2, &targets)?;
        let acc = accuracy(&probs_of(logits, 2), 2, &targets);
        self.net.backward(&act, &[&ones], &[&input, &grid.k3, &grid.k1], &grad)?;
        Ok(FeatureLoss {
            bits,
            accuracy: acc,
            symbols: targets.len(),
        })
    }

    /// Row-by-row evaluation state for sequential decoding.
    pub fn session(&self) -> Result<OccupancySession<'_>> {
        OccupancySession::new(self)
    }
}

/// Incremental evaluation that reproduces [`OccupancyModel::forward`] one
/// voxel at a time while occupancy is revealed in raster order.
pub struct OccupancySession<'m> {
    model: &'m OccupancyModel,
    grid: Arc<GridMaps>,
    input: KernelMap,
    index: Vec<u32>,
    ones: Vec<f64>,
    coords: Vec<VoxelCoord>,
    act: Activations,
    next: usize,
}

impl<'m> OccupancySession<'m> {
    fn new(model: &'m OccupancyModel) -> Result<Self> {
        let d = model.cfg.d;
        let grid = grid_maps(d)?;
        let input = KernelMap::empty(d * d * d, model.cfg.k_first)?;
        let act = model.net.prepare_rows(&[&[]], &[&input, &grid.k3, &grid.k1], d * d * d)?;
        Ok(OccupancySession {
            model,
            grid,
            input,
            index: vec![NONE; d * d * d],
            ones: Vec::new(),
            coords: Vec::new(),
            act,
            next: 0,
        })
    }

    /// Raster index of the voxel whose distribution comes next.
    pub fn position(&self) -> usize {
        self.next
    }

    /// `[p(empty), p(occupied)]` for the next voxel.
    pub fn probs(&mut self) -> Result<Vec<f64>> {
        let d = self.model.cfg.d;
        if self.next >= d * d * d {
            return Err(Error::Range("occupancy session already complete".into()));
        }
        let i = self.next;
        self.input
            .fill_row(i, from_raster_index(i as u64, d as u64), lookup(&self.index, d));
        let maps = [&self.input, &self.grid.k3, &self.grid.k1];
        self.model.net.forward_row(&mut self.act, &[&self.ones], &maps, i);
        Ok(softmax(self.model.net.output_row(&self.act, i)))
    }

    /// Reveals the symbol of the current voxel and advances.
    pub fn push(&mut self, occupied: bool) {
        let d = self.model.cfg.d as u64;
        if occupied {
            self.index[self.next] = self.coords.len() as u32;
            self.coords.push(from_raster_index(self.next as u64, d));
            self.ones.push(1.0);
        }
        self.next += 1;
    }

    pub fn into_coords(self) -> Vec<VoxelCoord> {
        self.coords
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_block(d: u32, n: usize, seed: u64) -> Vec<VoxelCoord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c: Vec<VoxelCoord> = (0..n)
            .map(|_| VoxelCoord::new(rng.gen_range(0..d), rng.gen_range(0..d), rng.gen_range(0..d)))
            .collect();
        c.sort();
        c.dedup();
        c
    }

    fn trained_like(cfg: ModelConfig, seed: u64) -> OccupancyModel {
        let mut m = OccupancyModel::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut m.net.layers {
            l.init_uniform(&mut rng);
            for b in &mut l.bias.value {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        m
    }

    #[test]
    fn zero_params_are_uniform() {
        let mut m = OccupancyModel::new(ModelConfig::small(4)).unwrap();
        m.init(1);
        let p = m.forward(&random_block(4, 10, 2)).unwrap();
        assert_eq!(p.len(), 64 * 2);
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rows_sum_to_one_including_empty_block() {
        let m = trained_like(ModelConfig::small(4), 3);
        for coords in [vec![], random_block(4, 20, 4)] {
            let p = m.forward(&coords).unwrap();
            for row in p.chunks(2) {
                assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_block_coords_rejected() {
        let m = OccupancyModel::new(ModelConfig::small(4)).unwrap();
        assert!(matches!(m.forward(&[VoxelCoord::new(0, 4, 0)]), Err(Error::Range(_))));
    }

    #[test]
    fn flipping_a_voxel_only_changes_later_rows() {
        let m = trained_like(ModelConfig::small(8), 5);
        let base = random_block(8, 60, 6);
        let p0 = m.forward(&base).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..8 {
            let j = rng.gen_range(0..500u64);
            let c = from_raster_index(j, 8);
            let mut flipped = base.clone();
            match flipped.binary_search(&c) {
                Ok(i) => {
                    flipped.remove(i);
                }
                Err(i) => flipped.insert(i, c),
            }
            let p1 = m.forward(&flipped).unwrap();
            let j = j as usize;
            assert_eq!(p0[..2 * (j + 1)], p1[..2 * (j + 1)]);
            assert_ne!(p0[2 * (j + 1)..], p1[2 * (j + 1)..]);
        }
    }

    #[test]
    fn session_matches_full_pass_bitwise() {
        let m = trained_like(ModelConfig::small(8), 8);
        let coords = random_block(8, 80, 9);
        let full = m.forward(&coords).unwrap();
        let targets = occupancy_targets(&coords, 8).unwrap();
        let mut s = m.session().unwrap();
        for (i, &t) in targets.iter().enumerate() {
            assert_eq!(s.probs().unwrap(), full[2 * i..2 * i + 2]);
            s.push(t == 1);
        }
        assert!(s.probs().is_err());
        assert_eq!(s.into_coords(), coords);
    }

    #[test]
    fn joint_probability_matches_loss() {
        let mut m = trained_like(ModelConfig::small(4), 10);
        let coords = random_block(4, 12, 11);
        let p = m.forward(&coords).unwrap();
        let t = occupancy_targets(&coords, 4).unwrap();
        let log_joint: f64 = t.iter().enumerate().map(|(i, &s)| p[2 * i + s].log2()).sum();
        let loss = m.accumulate(&coords).unwrap();
        assert!((-log_joint / 64.0 - loss.bits).abs() < 1e-12);
    }

    #[test]
    fn repeated_forward_is_bitwise_identical() {
        let m = trained_like(ModelConfig::small(4), 12);
        let coords = random_block(4, 9, 13);
        assert_eq!(m.logits(&coords).unwrap(), m.logits(&coords).unwrap());
    }
}
