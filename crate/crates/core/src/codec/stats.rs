use serde::Serialize;

use super::bitstream::{Bitstream, BLOCK_FRAME_BYTES, FIXED_HEADER_BYTES};

/// Rate breakdown of one bitstream. Feature bits count range-coder payload
/// bytes only; headers, octree and per-block framing are `overhead_bits`.
/// `total_bits` is the file size in bits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodecStats {
    pub points: u64,
    pub blocks: usize,
    pub file_bytes: usize,
    pub feature_bits: [u64; 4],
    pub overhead_bits: u64,
    pub total_bits: u64,
    pub feature_bpp: [f64; 4],
    pub overhead_bpp: f64,
    pub total_bpp: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encode_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decode_seconds: Option<f64>,
}

pub fn stats(b: &Bitstream) -> CodecStats {
    let points = b.num_points();
    let per_point = |bits: u64| if points == 0 { 0.0 } else { bits as f64 / points as f64 };
    let feature_bits = [0, 1, 2, 3].map(|f| b.payloads[f].iter().map(|p| 8 * p.bytes.len() as u64).sum::<u64>());
    let overhead_bits =
        8 * (FIXED_HEADER_BYTES + b.octree.bytes.len() + 4 * b.num_blocks() * BLOCK_FRAME_BYTES) as u64;
    let total_bits = feature_bits.iter().sum::<u64>() + overhead_bits;
    CodecStats {
        points,
        blocks: b.num_blocks(),
        file_bytes: b.len_bytes(),
        feature_bits,
        overhead_bits,
        total_bits,
        feature_bpp: feature_bits.map(per_point),
        overhead_bpp: per_point(overhead_bits),
        total_bpp: per_point(total_bits),
        encode_seconds: None,
        decode_seconds: None,
    }
}
