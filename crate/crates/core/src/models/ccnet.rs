use super::{init_network, probs_of, FeatureId, FeatureLoss, ModelConfig, NormParams};
use crate::colorspace::{self, ColorTransform};
use crate::error::{Error, Result};
use crate::pcloud::VoxelCoord;
use crate::sparsenn::{accuracy, softmax, softmax_ce_rows, Activations, GraphBuilder, KernelMap, Mask, Network};

/// Same-set kernel maps over the occupied voxels of one block.
#[derive(Debug, Clone)]
pub struct PointMaps {
    pub first: KernelMap,
    pub k3: KernelMap,
    pub k1: KernelMap,
}

impl PointMaps {
    pub fn new(coords: &[VoxelCoord], k_first: usize) -> Result<Self> {
        Ok(PointMaps {
            first: KernelMap::build(coords, coords, k_first)?,
            k3: KernelMap::build(coords, coords, 3)?,
            k1: KernelMap::build(coords, coords, 1)?,
        })
    }

    fn refs(&self) -> [&KernelMap; 3] {
        [&self.first, &self.k3, &self.k1]
    }

    pub fn len(&self) -> usize {
        self.k1.n_out()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Normalized values of color column `channel`.
pub fn color_history(features: &[u16], cols: usize, channel: usize, cs: &dyn ColorTransform) -> Vec<f64> {
    let np = NormParams::for_channel(cs, channel);
    features.chunks_exact(cols).map(|r| np.normalize(r[channel])).collect()
}

/// Second-branch input for `feature`: occupancy (1.0) followed by the
/// normalized values of every earlier color column.
pub fn color_context(features: &[u16], cols: usize, feature: FeatureId, cs: &dyn ColorTransform) -> Vec<f64> {
    let earlier = feature.channel().unwrap_or(0);
    let norms: Vec<NormParams> = (0..earlier).map(|c| NormParams::for_channel(cs, c)).collect();
    let mut out = Vec::with_capacity(features.len() / cols.max(1) * (earlier + 1));
    for r in features.chunks_exact(cols) {
        out.push(1.0);
        for (c, np) in norms.iter().enumerate() {
            out.push(np.normalize(r[c]));
        }
    }
    out
}

/// Color model for one channel. The main branch sees only earlier values of
/// the channel being coded; the unmasked second branch sees the occupancy
/// and all earlier channels at every point.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorModel {
    pub cfg: ModelConfig,
    pub feature: FeatureId,
    pub alphabet: usize,
    pub colorspace_id: u8,
    pub net: Network,
}

impl ColorModel {
    pub fn new(cfg: ModelConfig, feature: FeatureId, cs: &dyn ColorTransform) -> Result<Self> {
        cfg.validate()?;
        if feature.channel().is_none() {
            return Err(Error::Config("color model for the occupancy feature".into()));
        }
        let alphabet = feature.alphabet(cs);
        let c = cfg.channels;
        let mut b = GraphBuilder::new();
        let hist = b.input(1, true);
        let ctx = b.input(feature.index(), false);
        let mut h = b.conv_elu(hist, cfg.k_first, c, Mask::TypeA, 0)?;
        for _ in 0..cfg.c_res_blocks {
            h = b.residual(h, Mask::TypeB, 2, 1)?;
            h = b.conv_elu(h, 3, c, Mask::TypeB, 1)?;
        }
        let s = b.conv_elu(ctx, cfg.k_first, c, Mask::None, 0)?;
        let s = b.conv_elu(s, 3, c, Mask::None, 1)?;
        let mut m = b.add(h, s)?;
        for _ in 0..2 {
            m = b.conv_elu(m, 3, c, Mask::TypeB, 1)?;
        }
        let out = b.conv(m, 1, alphabet, Mask::TypeB, 2)?;
        Ok(ColorModel {
            cfg,
            feature,
            alphabet,
            colorspace_id: cs.id(),
            net: b.finish(out),
        })
    }

    pub fn init(&mut self, seed: u64) {
        init_network(&mut self.net, seed);
    }

    pub fn colorspace(&self) -> &'static dyn ColorTransform {
        colorspace::by_id(self.colorspace_id).expect("model color space validated on construction")
    }

    pub fn channel(&self) -> usize {
        self.feature.channel().expect("color feature")
    }

    /// `N × K` logits from prepared inputs.
    pub fn logits(&self, maps: &PointMaps, history: &[f64], context: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(maps, history, context)?;
        self.net.forward_output(&[history, context], &maps.refs())
    }

    fn check_inputs(&self, maps: &PointMaps, history: &[f64], context: &[f64]) -> Result<()> {
        let n = maps.len();
        if history.len() != n || context.len() != n * self.feature.index() {
            return Err(Error::Shape(format!(
                "{} history and {} context values for {n} points",
                history.len(),
                context.len()
            )));
        }
        Ok(())
    }

    fn inputs(&self, maps: &PointMaps, features: &[u16], cols: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if cols < 3 || features.len() != maps.len() * cols {
            return Err(Error::Shape(format!(
                "{} feature values in {cols} columns for {} points",
                features.len(),
                maps.len()
            )));
        }
        let cs = self.colorspace();
        Ok((
            color_history(features, cols, self.channel(), cs),
            color_context(features, cols, self.feature, cs),
        ))
    }

    /// `N × K` probabilities for this channel given the block's symbols.
    /// Row i depends on this channel only through rows before i, and on
    /// earlier channels everywhere; later channels are ignored.
    pub fn forward_with(&self, maps: &PointMaps, features: &[u16], cols: usize) -> Result<Vec<f64>> {
        let (h, c) = self.inputs(maps, features, cols)?;
        Ok(probs_of(&self.logits(maps, &h, &c)?, self.alphabet))
    }

    pub fn forward(&self, coords: &[VoxelCoord], features: &[u16], cols: usize) -> Result<Vec<f64>> {
        self.forward_with(&PointMaps::new(coords, self.cfg.k_first)?, features, cols)
    }

    /// Forward and backward over one block; gradients accumulate in the parameters.
    pub fn accumulate(&mut self, maps: &PointMaps, features: &[u16], cols: usize) -> Result<FeatureLoss> {
        let (h, c) = self.inputs(maps, features, cols)?;
        let refs = maps.refs();
        let act = self.net.forward(&[&h, &c], &refs)?;
        let ch = self.channel();
        let targets: Vec<usize> = features.chunks_exact(cols).map(|r| r[ch] as usize).collect();
        let logits = &act.values[self.net.output()];
        let (bits, grad) = softmax_ce_rows(logits, self.alphabet, &targets)?;
        let acc = accuracy(&probs_of(logits, self.alphabet), self.alphabet, &targets);
        self.net.backward(&act, &[&h, &c], &refs, &grad)?;
        Ok(FeatureLoss {
            bits,
            accuracy: acc,
            symbols: targets.len(),
        })
    }

    /// Row-by-row evaluation for sequential decoding. Columns before this
    /// channel must hold final values; the rest are ignored.
    pub fn session<'a>(&'a self, maps: &'a PointMaps, features: &[u16], cols: usize) -> Result<ColorSession<'a>> {
        let (mut history, context) = self.inputs(maps, features, cols)?;
        history.iter_mut().for_each(|v| *v = 0.0);
        let act = self.net.prepare_rows(&[&history, &context], &maps.refs(), maps.len())?;
        Ok(ColorSession {
            model: self,
            maps,
            norm: NormParams::for_channel(self.colorspace(), self.channel()),
            history,
            context,
            act,
            next: 0,
        })
    }
}

/// Incremental evaluation reproducing [`ColorModel::forward_with`] one point at a time.
pub struct ColorSession<'a> {
    model: &'a ColorModel,
    maps: &'a PointMaps,
    norm: NormParams,
    history: Vec<f64>,
    context: Vec<f64>,
    act: Activations,
    next: usize,
}

impl ColorSession<'_> {
    pub fn position(&self) -> usize {
        self.next
    }

    pub fn probs(&mut self) -> Result<Vec<f64>> {
        if self.next >= self.maps.len() {
            return Err(Error::Range("color session already complete".into()));
        }
        let inputs: [&[f64]; 2] = [&self.history, &self.context];
        self.model.net.forward_row(&mut self.act, &inputs, &self.maps.refs(), self.next);
        Ok(softmax(self.model.net.output_row(&self.act, self.next)))
    }

    pub fn push(&mut self, symbol: u16) {
        self.history[self.next] = self.norm.normalize(symbol);
        self.next += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::{Rgb, YCoCg};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(d: u32, n: usize, seed: u64, cs: &dyn ColorTransform) -> (Vec<VoxelCoord>, Vec<u16>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c: Vec<VoxelCoord> = (0..n)
            .map(|_| VoxelCoord::new(rng.gen_range(0..d), rng.gen_range(0..d), rng.gen_range(0..d)))
            .collect();
        c.sort();
        c.dedup();
        let f = c.iter().flat_map(|_| cs.forward([rng.gen(), rng.gen(), rng.gen()])).collect();
        (c, f)
    }

    fn randomized(f: FeatureId, cs: &dyn ColorTransform, seed: u64) -> ColorModel {
        let mut m = ColorModel::new(ModelConfig::small(8), f, cs).unwrap();
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
        let (c, f) = block(8, 30, 1, &YCoCg);
        for feat in FeatureId::COLORS {
            let mut m = ColorModel::new(ModelConfig::small(8), feat, &YCoCg).unwrap();
            m.init(2);
            let p = m.forward(&c, &f, 3).unwrap();
            let k = m.alphabet as f64;
            assert!(p.iter().all(|&v| v == 1.0 / k));
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let (c, f) = block(8, 40, 3, &Rgb);
        let m = randomized(FeatureId::new(2).unwrap(), &Rgb, 4);
        for row in m.forward(&c, &f, 3).unwrap().chunks(256) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn history_is_causal_and_context_is_not() {
        let (c, f) = block(8, 60, 5, &Rgb);
        let feat = FeatureId::new(2).unwrap();
        let m = randomized(feat, &Rgb, 6);
        let base = m.forward(&c, &f, 3).unwrap();
        let k = m.alphabet;
        let mut context_changed_earlier = false;
        for j in [0, 7, 30, c.len() - 1] {
            let mut g = f.clone();
            g[3 * j + 1] ^= 0x55;
            let p = m.forward(&c, &g, 3).unwrap();
            assert_eq!(base[..k * (j + 1)], p[..k * (j + 1)]);

            let mut g = f.clone();
            g[3 * j] ^= 0x55;
            let p = m.forward(&c, &g, 3).unwrap();
            context_changed_earlier |= j > 0 && base[..k * j] != p[..k * j];

            let mut g = f.clone();
            g[3 * j + 2] ^= 0x55;
            assert_eq!(m.forward(&c, &g, 3).unwrap(), base);
        }
        assert!(context_changed_earlier);
    }

    #[test]
    fn session_matches_full_pass_bitwise() {
        let (c, f) = block(8, 50, 7, &YCoCg);
        for feat in FeatureId::COLORS {
            let m = randomized(feat, &YCoCg, 8 + feat.index() as u64);
            let maps = PointMaps::new(&c, m.cfg.k_first).unwrap();
            let full = m.forward_with(&maps, &f, 3).unwrap();
            let ch = m.channel();
            let mut partial = f.clone();
            for r in partial.chunks_mut(3) {
                r[ch..].iter_mut().for_each(|v| *v = 0);
            }
            let mut s = m.session(&maps, &partial, 3).unwrap();
            let k = m.alphabet;
            for i in 0..c.len() {
                assert_eq!(s.probs().unwrap(), full[k * i..k * (i + 1)]);
                s.push(f[3 * i + ch]);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let (c, f) = block(8, 10, 9, &Rgb);
        let m = randomized(FeatureId::new(1).unwrap(), &Rgb, 10);
        assert!(matches!(m.forward(&c, &f[3..], 3), Err(Error::Shape(_))));
        assert!(ColorModel::new(ModelConfig::small(8), FeatureId::OCCUPANCY, &Rgb).is_err());
    }
}
