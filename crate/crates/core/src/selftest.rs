//! Invariant checks runnable from the command line.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocktree::{decode_octree, encode_origins};
use crate::codec::{decode_bytes, encode, DecodeOptions, EncodeOptions};
use crate::colorspace::{self, exhaustive_ycocg_mismatches};
use crate::error::Result;
use crate::models::{ColorModel, FeatureId, ModelBundle, ModelConfig, OccupancyModel};
use crate::pcloud::{from_raster_index, SparseTensor, VoxelCoord};
use crate::rangecoder::{decode_all, encode_all, quantize_pmf, QuantizedCdf};
use crate::sparsenn::{grad_check, grad_check_softmax_ce, mask_offsets, GraphBuilder, KernelMap, Mask, Network};

pub trait Suite: Send + Sync {
    fn name(&self) -> &'static str;
    /// `Ok(detail)` on success, `Err(reason)` on an invariant violation.
    fn run(&self, seed: u64) -> Result<std::result::Result<String, String>>;
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

pub fn suites() -> Vec<&'static dyn Suite> {
    vec![&Masks, &Causality, &GradChecks, &Coder, &YCoCg, &Octree, &RoundTrip]
}

pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    suites().into_iter().map(|s| run_one(s, seed)).collect()
}

pub fn run_one(s: &dyn Suite, seed: u64) -> SuiteReport {
    let t = Instant::now();
    let (passed, detail) = match s.run(seed) {
        Ok(Ok(d)) => (true, d),
        Ok(Err(d)) => (false, d),
        Err(e) => (false, format!("error: {e}")),
    };
    SuiteReport {
        suite: s.name(),
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

type Outcome = Result<std::result::Result<String, String>>;

fn fail(msg: String) -> Outcome {
    Ok(Err(msg))
}

struct Masks;

impl Suite for Masks {
    fn name(&self) -> &'static str {
        "masks"
    }

    fn run(&self, _seed: u64) -> Outcome {
        for k in [1usize, 3, 5, 7] {
            let vol = k * k * k;
            let c = (vol - 1) / 2;
            let a = mask_offsets(k, Mask::TypeA);
            let b = mask_offsets(k, Mask::TypeB);
            if a != (c..vol).collect::<Vec<_>>() || b != (c + 1..vol).collect::<Vec<_>>() {
                return fail(format!("kernel {k}: wrong zeroed offsets"));
            }
        }
        Ok(Ok("type A zeroes indices >= center, type B > center, k in {1,3,5,7}".into()))
    }
}

fn randomize(net: &mut Network, rng: &mut impl Rng) {
    for l in &mut net.layers {
        l.init_uniform(rng);
        for b in &mut l.bias.value {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
}

fn random_coords(d: u32, n: usize, rng: &mut impl Rng) -> Vec<VoxelCoord> {
    let mut c: Vec<VoxelCoord> = (0..n)
        .map(|_| VoxelCoord::new(rng.gen_range(0..d), rng.gen_range(0..d), rng.gen_range(0..d)))
        .collect();
    c.sort();
    c.dedup();
    c
}

struct Causality;

impl Suite for Causality {
    fn name(&self) -> &'static str {
        "causality"
    }

    fn run(&self, seed: u64) -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig::small(8);
        let mut occ = OccupancyModel::new(cfg)?;
        randomize(&mut occ.net, &mut rng);
        let cs = colorspace::by_name("ycocg")?;
        let mut col = ColorModel::new(cfg, FeatureId::new(2)?, cs)?;
        randomize(&mut col.net, &mut rng);
        let blocks = 10;
        for _ in 0..blocks {
            let coords = random_coords(8, 60, &mut rng);
            let base = occ.forward(&coords)?;
            let j = rng.gen_range(0..512u64);
            let flip = from_raster_index(j, 8);
            let mut other = coords.clone();
            match other.binary_search(&flip) {
                Ok(i) => {
                    other.remove(i);
                }
                Err(i) => other.insert(i, flip),
            }
            let p = occ.forward(&other)?;
            let upto = 2 * (j as usize + 1);
            if base[..upto] != p[..upto] {
                return fail(format!("occupancy row <= {j} changed"));
            }

            let feats: Vec<u16> = coords.iter().flat_map(|_| cs.forward([rng.gen(), rng.gen(), rng.gen()])).collect();
            let base = col.forward(&coords, &feats, 3)?;
            let j = rng.gen_range(0..coords.len());
            let mut g = feats.clone();
            g[3 * j + 1] = g[3 * j + 1].wrapping_add(1 + rng.gen_range(0..100)) % 512;
            let p = col.forward(&coords, &g, 3)?;
            let upto = col.alphabet * (j + 1);
            if base[..upto] != p[..upto] {
                return fail(format!("color row <= {j} changed"));
            }
        }
        Ok(Ok(format!("{blocks} random 8^3 blocks, occupancy and color perturbations")))
    }
}

struct GradChecks;

impl Suite for GradChecks {
    fn name(&self) -> &'static str {
        "gradcheck"
    }

    fn run(&self, seed: u64) -> Outcome {
        const TOL: f64 = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = random_coords(5, 30, &mut rng);
        let m1 = KernelMap::build(&coords, &coords, 1)?;
        let m3 = KernelMap::build(&coords, &coords, 3)?;
        let mut worst: f64 = 0.0;
        for mask in [Mask::TypeA, Mask::TypeB, Mask::None] {
            let mut b = GraphBuilder::new();
            let x = b.input(2, false);
            let h = b.conv_elu(x, 3, 3, mask, 1)?;
            let h = b.residual(h, if mask == Mask::TypeA { Mask::TypeB } else { mask }, 0, 1)?;
            let mut net = b.finish(h);
            randomize(&mut net, &mut rng);
            let input: Vec<f64> = (0..coords.len() * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            worst = worst.max(grad_check(&mut net, &[input], &[&m1, &m3], 1e-6, seed)?);
        }
        let logits: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
        worst = worst.max(grad_check_softmax_ce(&logits, 8, &[0, 1, 2, 3, 7], 1e-6)?);
        if worst < TOL {
            Ok(Ok(format!("max relative error {worst:.2e}")))
        } else {
            fail(format!("max relative error {worst:.2e} >= {TOL:e}"))
        }
    }
}

struct Coder;

impl Suite for Coder {
    fn name(&self) -> &'static str {
        "rangecoder"
    }

    fn run(&self, seed: u64) -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cases = 1000;
        for case in 0..cases {
            let len = rng.gen_range(0..200);
            let mut cdfs = Vec::with_capacity(len);
            let mut symbols = Vec::with_capacity(len);
            for _ in 0..len {
                let k = rng.gen_range(2..300);
                let pmf: Vec<f64> = (0..k).map(|_| rng.gen::<f64>().powi(4)).collect();
                let cdf = if pmf.iter().sum::<f64>() > 0.0 { quantize_pmf(&pmf)? } else { QuantizedCdf::uniform(k) };
                symbols.push(rng.gen_range(0..k));
                cdfs.push(cdf);
            }
            let bytes = encode_all(&symbols, &cdfs)?;
            let back = decode_all(&bytes, len, |i, _| Ok(cdfs[i].clone()))?;
            if back != symbols {
                return fail(format!("case {case} decoded differently"));
            }
        }
        Ok(Ok(format!("{cases} random sequences")))
    }
}

struct YCoCg;

impl Suite for YCoCg {
    fn name(&self) -> &'static str {
        "ycocg"
    }

    fn run(&self, _seed: u64) -> Outcome {
        match exhaustive_ycocg_mismatches() {
            0 => Ok(Ok("all 2^24 colors round-trip".into())),
            n => fail(format!("{n} mismatches")),
        }
    }
}

struct Octree;

impl Suite for Octree {
    fn name(&self) -> &'static str {
        "octree"
    }

    fn run(&self, seed: u64) -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cases = 200;
        for _ in 0..cases {
            let n = rng.gen_range(7..=10u8);
            let log2 = rng.gen_range(3..=6u8).min(n);
            let side = 1u32 << (n - log2);
            let mut origins: Vec<VoxelCoord> = (0..rng.gen_range(1..40))
                .map(|_| {
                    let b = 1u32 << log2;
                    VoxelCoord::new(rng.gen_range(0..side) * b, rng.gen_range(0..side) * b, rng.gen_range(0..side) * b)
                })
                .collect();
            origins.sort();
            origins.dedup();
            let s = encode_origins(&origins, n, log2);
            if decode_octree(&s, n, log2)? != origins {
                return fail(format!("n={n}, log2={log2}: origins differ"));
            }
        }
        Ok(Ok(format!("{cases} random partitions, n in 7..=10")))
    }
}

struct RoundTrip;

impl Suite for RoundTrip {
    fn name(&self) -> &'static str {
        "codec"
    }

    fn run(&self, seed: u64) -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for cs in colorspace::registry() {
            let mut models = ModelBundle::new(ModelConfig::small(8), cs, seed)?;
            randomize(&mut models.occupancy.net, &mut rng);
            for m in &mut models.colors {
                randomize(&mut m.net, &mut rng);
            }
            let coords = random_coords(16, 120, &mut rng);
            let colors: Vec<[u8; 3]> = coords.iter().map(|_| rng.gen()).collect();
            let cloud = SparseTensor::rgb(coords, &colors)?;
            let enc = encode(&cloud, 4, [0; 3], &models, &EncodeOptions::default())?;
            let out = decode_bytes(&enc.bitstream.to_bytes(), &models, &DecodeOptions::default())?;
            if out.cloud != cloud {
                return fail(format!("{} cloud differs after decoding", cs.name()));
            }
        }
        Ok(Ok("random 16^3 clouds, both color spaces".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_suites_pass() {
        for s in suites().into_iter().filter(|s| s.name() != "ycocg") {
            let r = run_one(s, 1);
            assert!(r.passed, "{}: {}", r.suite, r.detail);
        }
    }
}
