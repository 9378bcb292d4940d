//! Training loop for the four models of a bundle.

pub mod synthetic;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::colorspace::ColorTransform;
use crate::error::{Error, Result};
use crate::models::{ColorModel, FeatureId, FeatureLoss, ModelBundle, ModelConfig, OccupancyModel, PointMaps};
pub use crate::models::NormParams;
use crate::pcloud::SparseTensor;
use crate::sparsenn::{adam_step, AdamState, Network, StepLr};

pub fn normalize(x: u16, np: &NormParams) -> f64 {
    np.normalize(x)
}

pub fn denormalize(v: f64, np: &NormParams) -> u16 {
    np.denormalize(v)
}

pub const RHO_RANGE: (f64, f64) = (0.3, 1.0);

/// Keeps each point with probability `rho` drawn from `range`; at least
/// the raster-first point survives.
pub fn subsample_augment(block: &SparseTensor, range: (f64, f64), rng: &mut impl Rng) -> SparseTensor {
    let rho = if range.0 < range.1 { rng.gen_range(range.0..=range.1) } else { range.0 };
    subsample_with_rate(block, rho, rng)
}

pub fn subsample_with_rate(block: &SparseTensor, rho: f64, rng: &mut impl Rng) -> SparseTensor {
    let keep: Vec<bool> = (0..block.len()).map(|_| rng.gen::<f64>() < rho).collect();
    if keep.iter().any(|&k| k) || block.is_empty() {
        block.filter(|i| keep[i])
    } else {
        block.filter(|i| i == 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub epochs: usize,
    /// Optimizer steps per epoch.
    pub epoch_len: usize,
    pub batch_size: usize,
    pub schedule: StepLr,
    /// `None` disables sub-sampling.
    pub rho_range: Option<(f64, f64)>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            seed: 0,
            epochs: 1,
            epoch_len: 100,
            batch_size: 32,
            schedule: StepLr::default(),
            rho_range: Some(RHO_RANGE),
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub feature: usize,
    pub loss_bits: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: ModelBundle,
    pub metrics: Vec<MetricRow>,
    /// Mean losses on the validation set after each epoch.
    pub validation: Vec<MetricRow>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    /// Last logged training row for `feature`.
    pub fn last(&self, feature: FeatureId) -> Option<&MetricRow> {
        self.metrics.iter().rev().find(|r| r.feature == feature.index())
    }
}

pub fn write_metrics_csv(rows: &[MetricRow], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

/// A training example: coords plus colors in the target color space.
struct Example {
    block: SparseTensor,
    symbols: Vec<u16>,
    maps: Option<PointMaps>,
}

fn prepare(block: SparseTensor, cs: &dyn ColorTransform, k_first: usize) -> Result<Example> {
    if !block.has_color() {
        return Ok(Example {
            block,
            symbols: Vec::new(),
            maps: None,
        });
    }
    let symbols = block.rgb_rows().into_iter().flat_map(|c| cs.forward(c)).collect();
    let maps = Some(PointMaps::new(block.coords(), k_first)?);
    Ok(Example { block, symbols, maps })
}

fn scale_grads(net: &mut Network, s: f64) {
    for p in net.params_mut() {
        p.grad.iter_mut().for_each(|g| *g *= s);
    }
}

enum Target<'a> {
    Occupancy(&'a mut OccupancyModel),
    Color(&'a mut ColorModel),
}

/// Accumulates one feature's loss over a batch and steps its optimizer.
fn step_feature(target: Target<'_>, batch: &[Example], adam: &mut AdamState, lr: f64) -> Result<FeatureLoss> {
    let mut total = FeatureLoss::default();
    let mut used = 0usize;
    let mut add = |l: FeatureLoss| {
        total.bits += l.bits;
        total.accuracy += l.accuracy;
        total.symbols += l.symbols;
        used += 1;
    };
    let (net, feature) = match target {
        Target::Occupancy(m) => {
            m.net.zero_grad();
            for ex in batch {
                add(m.accumulate(ex.block.coords())?);
            }
            (&mut m.net, 0)
        }
        Target::Color(m) => {
            m.net.zero_grad();
            for ex in batch {
                if let Some(maps) = &ex.maps {
                    add(m.accumulate(maps, &ex.symbols, 3)?);
                }
            }
            (&mut m.net, m.feature.index())
        }
    };
    if used == 0 {
        return Ok(total);
    }
    total.bits /= used as f64;
    total.accuracy /= used as f64;
    if !total.bits.is_finite() {
        return Err(Error::Diverged(format!("feature {feature} loss is {}", total.bits)));
    }
    scale_grads(net, 1.0 / used as f64);
    adam_step(net, adam, lr);
    if net.params().any(|p| p.value.iter().any(|v| !v.is_finite())) {
        return Err(Error::Diverged(format!("feature {feature} parameters became non-finite")));
    }
    Ok(total)
}

/// Trains all four models. Each feature has its own optimizer, and the four
/// step in parallel on the same batch. Identical inputs give bitwise
/// identical models.
pub fn train(
    dataset: &[SparseTensor],
    validation: &[SparseTensor],
    colorspace: &'static dyn ColorTransform,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let init = ModelBundle::new(cfg.model, colorspace, cfg.seed)?;
    train_from(init, dataset, validation, cfg)
}

pub fn train_from(
    mut models: ModelBundle,
    dataset: &[SparseTensor],
    validation: &[SparseTensor],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let cs = models.colorspace;
    let mcfg = models.config();
    if let Some(b) = dataset.iter().chain(validation).find(|b| b.coords().iter().any(|c| c.max_component() as usize >= mcfg.d)) {
        return Err(Error::Range(format!("training block with {} points exceeds side {}", b.len(), mcfg.d)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_da7a);

    // Validation blocks are sub-sampled once and reused.
    let val: Vec<Example> = validation
        .iter()
        .map(|b| {
            let b = match cfg.rho_range {
                Some(r) => subsample_augment(b, r, &mut rng),
                None => b.clone(),
            };
            prepare(b, cs, mcfg.k_first)
        })
        .collect::<Result<_>>()?;

    let mut adams: [AdamState; 4] = Default::default();
    let mut metrics = Vec::new();
    let mut val_rows = Vec::new();
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr(epoch);
        for _ in 0..cfg.epoch_len {
            let batch: Vec<Example> = (0..cfg.batch_size)
                .map(|_| {
                    if order.is_empty() {
                        order = (0..dataset.len()).collect();
                        order.shuffle(&mut rng);
                    }
                    let b = &dataset[order.pop().expect("refilled")];
                    let b = match cfg.rho_range {
                        Some(r) => subsample_augment(b, r, &mut rng),
                        None => b.clone(),
                    };
                    prepare(b, cs, mcfg.k_first)
                })
                .collect::<Result<_>>()?;

            let mut targets = vec![Target::Occupancy(&mut models.occupancy)];
            targets.extend(models.colors.iter_mut().map(Target::Color));
            let results: Vec<Result<FeatureLoss>> = targets
                .into_par_iter()
                .zip(adams.par_iter_mut())
                .map(|(t, a)| step_feature(t, &batch, a, lr))
                .collect();
            for (f, r) in results.into_iter().enumerate() {
                let l = r?;
                if l.symbols > 0 {
                    metrics.push(MetricRow {
                        step,
                        feature: f,
                        loss_bits: l.bits,
                        accuracy: l.accuracy,
                        lr,
                    });
                }
            }
            step += 1;
        }

        if !val.is_empty() {
            for f in FeatureId::ALL {
                let mut bits = 0.0;
                let mut acc = 0.0;
                let mut n = 0usize;
                for ex in &val {
                    if f.channel().is_some() && ex.maps.is_none() {
                        continue;
                    }
                    let l = models.block_loss(&ex.block)?;
                    bits += l.features[f.index()].bits;
                    acc += l.features[f.index()].accuracy;
                    n += 1;
                }
                if n > 0 {
                    val_rows.push(MetricRow {
                        step,
                        feature: f.index(),
                        loss_bits: bits / n as f64,
                        accuracy: acc / n as f64,
                        lr,
                    });
                }
            }
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("checkpoint-{epoch:04}.cnmb"));
            models.save(&path)?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome {
        models,
        metrics,
        validation: val_rows,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::{Rgb, YCoCg};

    fn tiny() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                channels: 4,
                c_res_blocks: 1,
                o_res_blocks: 1,
                ..ModelConfig::small(8)
            },
            epochs: 2,
            epoch_len: 3,
            batch_size: 2,
            ..Default::default()
        }
    }

    fn data(seed: u64) -> Vec<SparseTensor> {
        synthetic::dataset(3, 8, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn subsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = synthetic::generate(synthetic::Shape::Sphere, 16, &mut rng);
        assert_eq!(subsample_with_rate(&b, 1.0, &mut rng), b);
        let one = b.filter(|i| i == 3);
        let kept = subsample_with_rate(&one, 0.0, &mut rng);
        assert_eq!(kept, one);
        let none = subsample_with_rate(&b, 0.0, &mut rng);
        assert_eq!(none.coords(), &b.coords()[..1]);
        let x = subsample_augment(&b, RHO_RANGE, &mut ChaCha8Rng::seed_from_u64(9));
        let y = subsample_augment(&b, RHO_RANGE, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(x, y);
        assert!(x.len() <= b.len() && !x.is_empty());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig { epochs: 0, ..tiny() };
        let out = train(&data(1), &[], &Rgb, &cfg).unwrap();
        assert_eq!(out.models, ModelBundle::new(cfg.model, &Rgb, cfg.seed).unwrap());
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_logs_every_feature() {
        let cfg = tiny();
        let a = train(&data(2), &data(3), &YCoCg, &cfg).unwrap();
        let b = train(&data(2), &data(3), &YCoCg, &cfg).unwrap();
        assert_eq!(a.models.to_bytes(), b.models.to_bytes());
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 6 * 4);
        assert_eq!(a.validation.len(), 2 * 4);
        assert_ne!(a.models, ModelBundle::new(cfg.model, &YCoCg, cfg.seed).unwrap());
        // Masked taps stay zero.
        let fresh = ModelBundle::new(cfg.model, &YCoCg, 0).unwrap();
        for (l, f) in a.models.occupancy.net.layers.iter().zip(&fresh.occupancy.net.layers) {
            let allowed = l.allowed();
            let per = l.c_in * l.c_out;
            for off in 0..l.k.pow(3) {
                if !allowed.contains(&off) {
                    assert!(l.weight.value[off * per..(off + 1) * per].iter().all(|&v| v == 0.0));
                    assert!(f.weight.value[off * per..(off + 1) * per].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn checkpoints_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_dir: Some(dir.path().join("ck")),
            ..tiny()
        };
        let out = train(&data(4), &[], &Rgb, &cfg).unwrap();
        assert_eq!(out.checkpoints.len(), 2);
        let last = ModelBundle::load(out.checkpoints.last().unwrap()).unwrap();
        assert_eq!(last, out.models);
        let mut buf = Vec::new();
        write_metrics_csv(&out.metrics, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,feature,loss_bits,accuracy,lr\n"));
        assert_eq!(text.lines().count(), 1 + out.metrics.len());
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            schedule: StepLr {
                base: f64::INFINITY,
                ..StepLr::default()
            },
            ..tiny()
        };
        assert!(matches!(train(&data(5), &[], &Rgb, &cfg), Err(Error::Diverged(_))));
    }

    #[test]
    fn rejects_empty_dataset() {
        assert!(matches!(train(&[], &[], &Rgb, &tiny()), Err(Error::Config(_))));
    }
}
