use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::colorspace::{ColorTransform, Rgb, YCoCg};
use crate::models::ModelConfig;

fn random_cloud(n: u8, points: usize, seed: u64, color: bool) -> SparseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 1u32 << n;
    let mut c: Vec<VoxelCoord> = (0..points)
        .map(|_| VoxelCoord::new(rng.gen_range(0..side), rng.gen_range(0..side), rng.gen_range(0..side)))
        .collect();
    c.sort();
    c.dedup();
    if color {
        let colors: Vec<[u8; 3]> = c.iter().map(|_| rng.gen()).collect();
        SparseTensor::rgb(c, &colors).unwrap()
    } else {
        SparseTensor::geometry_only(c).unwrap()
    }
}

/// Every parameter random, so no output is uniform.
fn noisy_models(d: usize, cs: &'static dyn ColorTransform, seed: u64) -> ModelBundle {
    let mut b = ModelBundle::new(ModelConfig::small(d), cs, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jiggle = |net: &mut crate::sparsenn::Network| {
        for p in net.params_mut() {
            p.value.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        net.apply_masks();
    };
    jiggle(&mut b.occupancy.net);
    for m in &mut b.colors {
        jiggle(&mut m.net);
    }
    b
}

fn round_trip(cloud: &SparseTensor, n: u8, models: &ModelBundle, dec: DecodeOptions) -> Encoded {
    let enc = encode(cloud, n, [1, -2, 3], models, &EncodeOptions { trace: dec.trace, ..Default::default() }).unwrap();
    let bytes = enc.bitstream.to_bytes();
    let out = decode_bytes(&bytes, models, &dec).unwrap();
    assert_eq!(&out.cloud, cloud);
    assert_eq!(out.n, n);
    assert_eq!(out.shift, [1, -2, 3]);
    if dec.trace {
        assert_eq!(enc.trace.as_ref().unwrap().first_mismatch(out.trace.as_ref().unwrap()), None);
    }
    enc
}

#[test]
fn untrained_round_trip_both_color_spaces() {
    for cs in [&Rgb as &'static dyn ColorTransform, &YCoCg] {
        let models = ModelBundle::new(ModelConfig::small(4), cs, 1).unwrap();
        round_trip(&random_cloud(4, 40, 2, true), 4, &models, DecodeOptions::default());
    }
}

#[test]
fn both_strategies_reproduce_encoder_cdfs() {
    for cs in [&Rgb as &'static dyn ColorTransform, &YCoCg] {
        let models = noisy_models(4, cs, 3);
        let cloud = random_cloud(3, 20, 4, true);
        for s in strategies() {
            round_trip(
                &cloud,
                3,
                &models,
                DecodeOptions {
                    workers: 2,
                    strategy: s,
                    trace: true,
                },
            );
        }
    }
}

#[test]
fn geometry_only_has_empty_color_streams() {
    let models = noisy_models(4, &Rgb, 5);
    let enc = round_trip(&random_cloud(5, 60, 6, false), 5, &models, DecodeOptions::default());
    let s = stats(&enc.bitstream);
    assert_eq!(s.feature_bits[1..], [0, 0, 0]);
    assert!(enc.bitstream.payloads[1..].iter().flatten().all(|p| p.count == 0 && p.bytes.is_empty()));
}

#[test]
fn empty_cloud() {
    let models = ModelBundle::new(ModelConfig::small(4), &Rgb, 1).unwrap();
    let enc = round_trip(&SparseTensor::empty(), 4, &models, DecodeOptions::default());
    assert_eq!(enc.bitstream.num_blocks(), 0);
    assert_eq!(stats(&enc.bitstream).total_bpp, 0.0);
}

#[test]
fn uniform_single_voxel_costs_one_bit_per_voxel() {
    let models = ModelBundle::new(ModelConfig::small(16), &Rgb, 1).unwrap();
    let cloud = SparseTensor::geometry_only(vec![VoxelCoord::new(3, 4, 5)]).unwrap();
    let enc = encode(&cloud, 4, [0; 3], &models, &EncodeOptions::default()).unwrap();
    let bytes = enc.bitstream.payloads[0][0].bytes.len();
    assert!((512..=512 + 6).contains(&bytes), "{bytes}");
    assert_eq!(enc.costs[0].quantized_bits, 4096.0);
}

#[test]
fn payload_bits_track_quantized_cross_entropy() {
    let models = noisy_models(8, &YCoCg, 7);
    let enc = encode(&random_cloud(4, 150, 8, true), 4, [0; 3], &models, &EncodeOptions::default()).unwrap();
    for (block, costs) in enc.block_costs.iter().enumerate() {
        for f in 0..4 {
            let bits = 8.0 * enc.bitstream.payloads[f][block].bytes.len() as f64;
            assert!((bits - costs[f].quantized_bits).abs() <= 128.0, "{f}: {bits} vs {:?}", costs[f]);
        }
    }
}

#[test]
fn tampering_is_detected() {
    let models = noisy_models(4, &Rgb, 9);
    let cloud = random_cloud(3, 25, 10, true);
    let bytes = encode(&cloud, 3, [0; 3], &models, &EncodeOptions::default())
        .unwrap()
        .bitstream
        .to_bytes();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let header = FIXED_HEADER_BYTES;
    for _ in 0..20 {
        let mut bad = bytes.clone();
        let i = rng.gen_range(header..bad.len());
        bad[i] ^= 1 << rng.gen_range(0..8);
        match decode_bytes(&bad, &models, &DecodeOptions::default()) {
            Err(_) => {}
            Ok(out) => assert_ne!(out.cloud, cloud, "flip at {i} went unnoticed"),
        }
    }
}

#[test]
fn wrong_models_are_rejected() {
    let a = noisy_models(4, &Rgb, 12);
    let b = noisy_models(4, &Rgb, 13);
    let bytes = encode(&random_cloud(3, 10, 14, true), 3, [0; 3], &a, &EncodeOptions::default())
        .unwrap()
        .bitstream
        .to_bytes();
    assert!(matches!(decode_bytes(&bytes, &b, &DecodeOptions::default()), Err(Error::ModelMismatch(_))));
}

#[test]
fn block_side_must_match_models() {
    let models = ModelBundle::new(ModelConfig::small(4), &Rgb, 1).unwrap();
    let opts = EncodeOptions {
        log2_block: Some(3),
        ..Default::default()
    };
    assert!(matches!(encode(&random_cloud(4, 5, 1, true), 4, [0; 3], &models, &opts), Err(Error::Config(_))));
}

#[test]
fn blocks_are_coded_independently() {
    let models = noisy_models(4, &Rgb, 15);
    let full = random_cloud(3, 40, 16, true);
    let first_octant = full.filter(|i| full.coords()[i].max_component() < 4);
    let a = encode(&full, 3, [0; 3], &models, &EncodeOptions::default()).unwrap();
    let b = encode(&first_octant, 3, [0; 3], &models, &EncodeOptions::default()).unwrap();
    for f in 0..4 {
        assert_eq!(a.bitstream.payloads[f][0], b.bitstream.payloads[f][0]);
    }
}

#[test]
fn later_features_do_not_affect_earlier_payloads() {
    let models = noisy_models(4, &Rgb, 17);
    let cloud = random_cloud(3, 30, 18, true);
    let mut colors = cloud.rgb_rows();
    colors.iter_mut().for_each(|c| c[2] = c[2].wrapping_add(77));
    let perturbed = SparseTensor::rgb(cloud.coords().to_vec(), &colors).unwrap();
    let a = encode(&cloud, 3, [0; 3], &models, &EncodeOptions::default()).unwrap().bitstream;
    let b = encode(&perturbed, 3, [0; 3], &models, &EncodeOptions::default()).unwrap().bitstream;
    assert_eq!(a.payloads[..3], b.payloads[..3]);
    assert_ne!(a.payloads[3], b.payloads[3]);
}

#[test]
fn stats_account_for_every_byte() {
    let models = noisy_models(4, &Rgb, 19);
    let b = encode(&random_cloud(4, 50, 20, true), 4, [0; 3], &models, &EncodeOptions::default())
        .unwrap()
        .bitstream;
    let s = stats(&b);
    assert_eq!(s.total_bits, 8 * b.to_bytes().len() as u64);
    assert_eq!(s.feature_bits.iter().sum::<u64>() + s.overhead_bits, s.total_bits);
    let bpp: f64 = s.feature_bpp.iter().sum::<f64>() + s.overhead_bpp;
    assert!((bpp - s.total_bpp).abs() < 1e-9);
}

#[test]
fn worker_count_does_not_change_output() {
    let models = noisy_models(4, &YCoCg, 21);
    let cloud = random_cloud(4, 80, 22, true);
    let one = encode(&cloud, 4, [0; 3], &models, &EncodeOptions { workers: 1, ..Default::default() }).unwrap();
    let many = encode(&cloud, 4, [0; 3], &models, &EncodeOptions { workers: 8, ..Default::default() }).unwrap();
    assert_eq!(one.bitstream, many.bitstream);
}
