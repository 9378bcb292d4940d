//! Occupancy and color context models plus their model-file format.

mod ccnet;
mod file;
mod norm;
mod ocnet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::colorspace::ColorTransform;
use crate::error::{Error, Result};
use crate::sparsenn::{accuracy, softmax_rows, Network};

pub use ccnet::{color_context, color_history, ColorModel, ColorSession, PointMaps};
pub use file::{read_bundle, write_bundle, BUNDLE_MAGIC, MODEL_MAGIC};
pub use norm::NormParams;
pub use ocnet::{grid_maps, occupancy_input_map, GridMaps, OccupancyModel, OccupancySession};

/// Architecture hyperparameters shared by all four models of a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d: usize,
    pub channels: usize,
    pub o_res_blocks: usize,
    pub c_res_blocks: usize,
    pub k_first: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            channels: 32,
            o_res_blocks: 2,
            c_res_blocks: 10,
            k_first: 5,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and desk-scale experiments.
    pub fn small(d: usize) -> Self {
        ModelConfig {
            d,
            channels: 8,
            o_res_blocks: 2,
            c_res_blocks: 2,
            k_first: 5,
        }
    }

    pub fn log2_d(&self) -> u8 {
        self.d.trailing_zeros() as u8
    }

    pub fn validate(&self) -> Result<()> {
        if !self.d.is_power_of_two() || self.d < 2 || self.d > 256 {
            return Err(Error::Config(format!("block side {} is not a power of two in [2, 256]", self.d)));
        }
        if self.channels == 0 {
            return Err(Error::Config("zero hidden channels".into()));
        }
        if self.k_first < 3 || self.k_first.is_multiple_of(2) {
            return Err(Error::Config(format!("first kernel {} must be odd and at least 3", self.k_first)));
        }
        Ok(())
    }
}

/// Feature index in coding order: 0 is occupancy, 1..=3 are color channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureId(u8);

impl FeatureId {
    pub const OCCUPANCY: FeatureId = FeatureId(0);
    pub const ALL: [FeatureId; 4] = [FeatureId(0), FeatureId(1), FeatureId(2), FeatureId(3)];
    pub const COLORS: [FeatureId; 3] = [FeatureId(1), FeatureId(2), FeatureId(3)];

    pub fn new(index: u8) -> Result<Self> {
        if index > 3 {
            return Err(Error::Range(format!("feature index {index} > 3")));
        }
        Ok(FeatureId(index))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Color column for f¹..f³.
    pub fn channel(self) -> Option<usize> {
        (self.0 > 0).then(|| self.0 as usize - 1)
    }

    pub fn alphabet(self, cs: &dyn ColorTransform) -> usize {
        match self.channel() {
            None => 2,
            Some(c) => 1 << cs.bitdepths()[c],
        }
    }
}

/// Per-feature mean loss (bits per symbol) and accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeatureLoss {
    pub bits: f64,
    pub accuracy: f64,
    pub symbols: usize,
}

/// The four-term loss of one block: occupancy averaged over `d³` voxels, colors over points.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TotalLoss {
    pub features: [FeatureLoss; 4],
}

impl TotalLoss {
    pub fn total(&self) -> f64 {
        self.features.iter().map(|f| f.bits).sum()
    }
}

/// Mean cross-entropy in bits of probability rows against targets.
pub fn mean_bits(probs: &[f64], k: usize, targets: &[usize]) -> Result<f64> {
    if probs.len() != k * targets.len() {
        return Err(Error::Shape(format!("{} probabilities for {} rows of {k}", probs.len(), targets.len())));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (row, &t) in probs.chunks_exact(k).zip(targets) {
        if t >= k {
            return Err(Error::Range(format!("target {t} outside alphabet of {k}")));
        }
        sum -= row[t].log2();
    }
    Ok(sum / targets.len() as f64)
}

/// Evaluates all four losses of one block from model probability outputs.
pub fn total_loss(outputs: [(&[f64], usize); 4], targets: [&[usize]; 4]) -> Result<TotalLoss> {
    let mut out = TotalLoss::default();
    for (f, ((probs, k), t)) in outputs.into_iter().zip(targets).enumerate() {
        out.features[f] = FeatureLoss {
            bits: mean_bits(probs, k, t)?,
            accuracy: accuracy(probs, k, t),
            symbols: t.len(),
        };
    }
    Ok(out)
}

pub(crate) fn probs_of(logits: &[f64], k: usize) -> Vec<f64> {
    softmax_rows(logits, k)
}

/// Uniform init in `±1/sqrt(fan_in)` with a zeroed final layer.
pub(crate) fn init_network(net: &mut Network, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = net.layers.len() - 1;
    for (i, l) in net.layers.iter_mut().enumerate() {
        if i == last {
            l.zero_params();
        } else {
            l.init_uniform(&mut rng);
        }
    }
}

/// Occupancy model, three color models and the color space they were trained for.
#[derive(Clone)]
pub struct ModelBundle {
    pub colorspace: &'static dyn ColorTransform,
    pub occupancy: OccupancyModel,
    pub colors: [ColorModel; 3],
}

impl std::fmt::Debug for ModelBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelBundle")
            .field("colorspace", &self.colorspace.name())
            .field("config", &self.occupancy.cfg)
            .finish()
    }
}

impl PartialEq for ModelBundle {
    fn eq(&self, other: &Self) -> bool {
        // Parameter values only; gradient buffers are scratch space.
        let values = |b: &ModelBundle| -> Vec<Vec<f64>> {
            std::iter::once(&b.occupancy.net)
                .chain(b.colors.iter().map(|m| &m.net))
                .flat_map(|n| n.params().map(|p| p.value.clone()))
                .collect()
        };
        self.colorspace.id() == other.colorspace.id()
            && self.config() == other.config()
            && values(self) == values(other)
    }
}

impl ModelBundle {
    /// Freshly initialized models; their outputs are exactly uniform.
    pub fn new(cfg: ModelConfig, colorspace: &'static dyn ColorTransform, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut occupancy = OccupancyModel::new(cfg)?;
        occupancy.init(seed);
        let mut colors = Vec::with_capacity(3);
        for f in FeatureId::COLORS {
            let mut m = ColorModel::new(cfg, f, colorspace)?;
            m.init(seed.wrapping_add(f.index() as u64));
            colors.push(m);
        }
        let colors: [ColorModel; 3] = colors.try_into().expect("three color models");
        Ok(ModelBundle {
            colorspace,
            occupancy,
            colors,
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.occupancy.cfg
    }

    pub fn color(&self, f: FeatureId) -> &ColorModel {
        &self.colors[f.channel().expect("color feature")]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        write_bundle(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_bundle(bytes)
    }

    /// Truncated SHA-256 of the serialized bundle; embedded in bitstreams.
    pub fn checksum(&self) -> [u8; 8] {
        file::digest(&self.to_bytes())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loss of every feature on one block of 8-bit RGB points.
    pub fn block_loss(&self, block: &crate::pcloud::SparseTensor) -> Result<TotalLoss> {
        let cfg = self.config();
        let coords = block.coords();
        let occ_probs = self.occupancy.forward(coords)?;
        let occ_targets = ocnet::occupancy_targets(coords, cfg.d)?;
        let mut out = TotalLoss::default();
        out.features[0] = FeatureLoss {
            bits: mean_bits(&occ_probs, 2, &occ_targets)?,
            accuracy: accuracy(&occ_probs, 2, &occ_targets),
            symbols: occ_targets.len(),
        };
        if block.has_color() && !block.is_empty() {
            let maps = PointMaps::new(coords, cfg.k_first)?;
            let symbols: Vec<u16> = block.rgb_rows().into_iter().flat_map(|c| self.colorspace.forward(c)).collect();
            for m in &self.colors {
                let k = m.alphabet;
                let ch = m.feature.channel().unwrap();
                let targets: Vec<usize> = symbols.chunks_exact(3).map(|r| r[ch] as usize).collect();
                let probs = m.forward_with(&maps, &symbols, 3)?;
                out.features[m.feature.index()] = FeatureLoss {
                    bits: mean_bits(&probs, k, &targets)?,
                    accuracy: accuracy(&probs, k, &targets),
                    symbols: targets.len(),
                };
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::{Rgb, YCoCg};

    #[test]
    fn feature_alphabets() {
        assert_eq!(FeatureId::OCCUPANCY.alphabet(&Rgb), 2);
        assert_eq!(FeatureId::new(1).unwrap().alphabet(&Rgb), 256);
        assert_eq!(FeatureId::new(1).unwrap().alphabet(&YCoCg), 256);
        assert_eq!(FeatureId::new(3).unwrap().alphabet(&YCoCg), 512);
        assert!(FeatureId::new(4).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { d: 12, ..ModelConfig::small(8) }.validate().is_err());
        assert!(ModelConfig { k_first: 4, ..ModelConfig::small(8) }.validate().is_err());
        assert!(ModelConfig { k_first: 1, ..ModelConfig::small(8) }.validate().is_err());
    }

    #[test]
    fn perfect_and_uniform_losses() {
        let onehot = [0.0, 1.0, 1.0, 0.0];
        let l = total_loss(
            [(&onehot, 2), (&onehot, 2), (&onehot, 2), (&onehot, 2)],
            [&[1, 0], &[1, 0], &[1, 0], &[1, 0]],
        )
        .unwrap();
        assert_eq!(l.total(), 0.0);
        assert!(l.features.iter().all(|f| f.accuracy == 1.0));

        let u2 = vec![0.5; 4];
        let u256 = vec![1.0 / 256.0; 512];
        let l = total_loss([(&u2, 2), (&u256, 256), (&u256, 256), (&u256, 256)], [&[0, 1], &[3, 9], &[0, 0], &[255, 1]])
            .unwrap();
        assert!((l.total() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn untrained_bundle_losses_are_uniform() {
        use crate::pcloud::{SparseTensor, VoxelCoord};
        for (cs, expected) in [(&Rgb as &'static dyn ColorTransform, 25.0), (&YCoCg, 27.0)] {
            let bundle = ModelBundle::new(ModelConfig::small(8), cs, 3).unwrap();
            let coords = vec![VoxelCoord::new(0, 1, 2), VoxelCoord::new(3, 3, 3), VoxelCoord::new(7, 0, 1)];
            let colors = [[1, 2, 3], [200, 100, 0], [255, 255, 255]];
            let block = SparseTensor::rgb(coords, &colors).unwrap();
            let l = bundle.block_loss(&block).unwrap();
            assert!((l.total() - expected).abs() < 1e-9, "{}", l.total());
        }
    }
}
