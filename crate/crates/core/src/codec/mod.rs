//! Block-wise encoder and decoder.
//!
//! Each block codes occupancy for all `d³` voxels in raster order, then the
//! three color channels over its occupied voxels. The first symbol of every
//! stream uses a uniform distribution.

mod bitstream;
mod stats;
mod strategy;

use std::time::Instant;

use rayon::prelude::*;

pub use bitstream::{Bitstream, BlockPayload, BLOCK_FRAME_BYTES, FIXED_HEADER_BYTES, MAGIC, VERSION};
pub use stats::{stats, CodecStats};
pub use strategy::{
    strategies, strategy_by_name, DecodeStrategy, Incremental, Reforward, SymbolSource, DEFAULT_STRATEGY,
};

use crate::blocktree::{encode_octree, merge_blocks, partition, Block, OctreeSignal};
use crate::colorspace;
use crate::error::{Error, Result};
use crate::models::{FeatureId, ModelBundle, PointMaps};
use crate::pcloud::{from_raster_index, SparseTensor, VoxelCoord, MAX_BIT_DEPTH};
use crate::rangecoder::{quantize_pmf, Decoder, Encoder, QuantizedCdf};

pub const DEFAULT_WORKERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodeOptions {
    pub workers: usize,
    /// Must match the models' block side when given.
    pub log2_block: Option<u8>,
    /// Record every CDF used, for comparison with a decoder trace.
    pub trace: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            workers: DEFAULT_WORKERS,
            log2_block: None,
            trace: false,
        }
    }
}

#[derive(Clone, Copy)]
pub struct DecodeOptions {
    pub workers: usize,
    pub strategy: &'static dyn DecodeStrategy,
    pub trace: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            workers: DEFAULT_WORKERS,
            strategy: &Incremental,
            trace: false,
        }
    }
}

/// Model cost of one stream: under the quantized CDFs actually coded, and
/// under the raw model probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StreamCost {
    pub quantized_bits: f64,
    pub model_bits: f64,
}

impl std::ops::AddAssign for StreamCost {
    fn add_assign(&mut self, o: Self) {
        self.quantized_bits += o.quantized_bits;
        self.model_bits += o.model_bits;
    }
}

/// Every CDF used, per block and feature, in coding order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub blocks: Vec<[Vec<QuantizedCdf>; 4]>,
}

impl Trace {
    /// `(block, feature, symbol)` of the first differing CDF.
    pub fn first_mismatch(&self, other: &Trace) -> Option<(usize, usize, usize)> {
        for (b, (x, y)) in self.blocks.iter().zip(&other.blocks).enumerate() {
            for f in 0..4 {
                let n = x[f].len().max(y[f].len());
                if let Some(i) = (0..n).find(|&i| x[f].get(i) != y[f].get(i)) {
                    return Some((b, f, i));
                }
            }
        }
        (self.blocks.len() != other.blocks.len()).then_some((self.blocks.len().min(other.blocks.len()), 0, 0))
    }
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub bitstream: Bitstream,
    pub costs: [StreamCost; 4],
    pub block_costs: Vec<[StreamCost; 4]>,
    pub trace: Option<Trace>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub cloud: SparseTensor,
    pub n: u8,
    pub shift: [i32; 3],
    pub trace: Option<Trace>,
    pub seconds: f64,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

fn stream_cdf(i: usize, probs: &[f64]) -> Result<QuantizedCdf> {
    if i == 0 {
        Ok(QuantizedCdf::uniform(probs.len()))
    } else {
        quantize_pmf(probs)
    }
}

fn code_stream(probs: &[f64], k: usize, targets: &[usize], trace: bool) -> Result<(BlockPayload, StreamCost, Vec<QuantizedCdf>)> {
    let mut enc = Encoder::new();
    let mut cost = StreamCost::default();
    let mut cdfs = Vec::new();
    for (i, (row, &t)) in probs.chunks_exact(k).zip(targets).enumerate() {
        let cdf = stream_cdf(i, row)?;
        enc.encode(t, &cdf)?;
        cost.quantized_bits += cdf.bits(t);
        cost.model_bits -= row[t].log2();
        if trace {
            cdfs.push(cdf);
        }
    }
    Ok((
        BlockPayload {
            count: targets.len() as u32,
            bytes: enc.finish(),
        },
        cost,
        cdfs,
    ))
}

type BlockResult = ([BlockPayload; 4], [StreamCost; 4], [Vec<QuantizedCdf>; 4]);

fn encode_block(block: &Block, models: &ModelBundle, geometry_only: bool, trace: bool) -> Result<BlockResult> {
    let cfg = models.config();
    let coords = block.local.coords();
    let mut payloads: [BlockPayload; 4] = Default::default();
    let mut costs = [StreamCost::default(); 4];
    let mut cdfs: [Vec<QuantizedCdf>; 4] = Default::default();

    let occ = models.occupancy.forward(coords)?;
    let mut targets = vec![0usize; cfg.d.pow(3)];
    for &c in coords {
        targets[crate::pcloud::raster_index(c, cfg.d as u64)? as usize] = 1;
    }
    (payloads[0], costs[0], cdfs[0]) = code_stream(&occ, 2, &targets, trace)?;
    payloads[0].count = coords.len() as u32;

    if geometry_only {
        return Ok((payloads, costs, cdfs));
    }
    let cs = models.colorspace;
    let features: Vec<u16> = block.local.rgb_rows().into_iter().flat_map(|c| cs.forward(c)).collect();
    let maps = PointMaps::new(coords, cfg.k_first)?;
    for m in &models.colors {
        let f = m.feature.index();
        let ch = m.channel();
        let probs = m.forward_with(&maps, &features, 3)?;
        let t: Vec<usize> = features.chunks_exact(3).map(|r| r[ch] as usize).collect();
        (payloads[f], costs[f], cdfs[f]) = code_stream(&probs, m.alphabet, &t, trace)?;
    }
    Ok((payloads, costs, cdfs))
}

fn check_models(models: &ModelBundle, log2_block: Option<u8>) -> Result<u8> {
    let d = models.config().d;
    let log2 = d.trailing_zeros() as u8;
    if let Some(l) = log2_block {
        if l != log2 {
            return Err(Error::Config(format!(
                "block side {} does not match the models' block side {d}",
                1u64 << l
            )));
        }
    }
    if FeatureId::COLORS
        .iter()
        .any(|&f| models.color(f).alphabet != f.alphabet(models.colorspace))
    {
        return Err(Error::Config("color model alphabets do not match the color space".into()));
    }
    Ok(log2)
}

/// Encodes a voxelized cloud at bit depth `n`. Colors, when present, are
/// 8-bit RGB and are transformed into the models' color space.
pub fn encode(cloud: &SparseTensor, n: u8, shift: [i32; 3], models: &ModelBundle, opts: &EncodeOptions) -> Result<Encoded> {
    let start = Instant::now();
    let log2_block = check_models(models, opts.log2_block)?;
    if n > MAX_BIT_DEPTH || n < log2_block {
        return Err(Error::Config(format!("bit depth {n} with block side 2^{log2_block}")));
    }
    let geometry_only = !cloud.has_color();
    if !geometry_only && cloud.bitdepths() != [8, 8, 8] {
        return Err(Error::Config(format!("expected 8-bit RGB colors, got bit depths {:?}", cloud.bitdepths())));
    }
    let part = partition(cloud, n, log2_block)?;
    let results: Vec<BlockResult> = pool(opts.workers)?.install(|| {
        part.blocks
            .par_iter()
            .map(|b| encode_block(b, models, geometry_only, opts.trace))
            .collect::<Result<_>>()
    })?;

    let mut payloads: [Vec<BlockPayload>; 4] = Default::default();
    let mut costs = [StreamCost::default(); 4];
    let mut block_costs = Vec::with_capacity(results.len());
    let mut trace = Trace::default();
    for (p, c, t) in results {
        for f in 0..4 {
            costs[f] += c[f];
        }
        block_costs.push(c);
        for (group, payload) in payloads.iter_mut().zip(p) {
            group.push(payload);
        }
        trace.blocks.push(t);
    }
    let bitstream = Bitstream {
        n,
        log2_block,
        colorspace: models.colorspace.id(),
        geometry_only,
        empty: cloud.is_empty(),
        shift,
        model_checksum: models.checksum(),
        octree: if cloud.is_empty() {
            OctreeSignal::default()
        } else {
            encode_octree(&part)
        },
        payloads,
    };
    Ok(Encoded {
        bitstream,
        costs,
        block_costs,
        trace: opts.trace.then_some(trace),
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn decode_stream(
    source: &mut dyn SymbolSource,
    payload: &BlockPayload,
    len: usize,
    mut on_symbol: impl FnMut(usize, usize),
    cdfs: Option<&mut Vec<QuantizedCdf>>,
) -> Result<()> {
    let mut dec = Decoder::new(&payload.bytes)?;
    let mut record = cdfs;
    for i in 0..len {
        let probs = source.probs()?;
        let cdf = stream_cdf(i, &probs)?;
        let s = dec.decode(&cdf)?;
        source.push(s)?;
        on_symbol(i, s);
        if let Some(r) = record.as_deref_mut() {
            r.push(cdf);
        }
    }
    dec.finish()
}

fn decode_block(
    payloads: [&BlockPayload; 4],
    models: &ModelBundle,
    geometry_only: bool,
    opts: &DecodeOptions,
) -> Result<(Vec<VoxelCoord>, Vec<u16>, [Vec<QuantizedCdf>; 4])> {
    let d = models.config().d;
    let mut cdfs: [Vec<QuantizedCdf>; 4] = Default::default();
    let [c0, c1, c2, c3] = &mut cdfs;
    let mut coords = Vec::new();
    let mut source = opts.strategy.occupancy(&models.occupancy)?;
    decode_stream(
        source.as_mut(),
        payloads[0],
        d * d * d,
        |i, s| {
            if s == 1 {
                coords.push(from_raster_index(i as u64, d as u64));
            }
        },
        opts.trace.then_some(c0),
    )?;
    drop(source);
    if coords.is_empty() || coords.len() != payloads[0].count as usize {
        return Err(Error::Decode(format!(
            "block decodes to {} points, header says {}",
            coords.len(),
            payloads[0].count
        )));
    }
    let n = coords.len();
    if geometry_only {
        if payloads[1..].iter().any(|p| p.count != 0 || !p.bytes.is_empty()) {
            return Err(Error::Decode("color payload in a geometry-only stream".into()));
        }
        return Ok((coords, Vec::new(), cdfs));
    }
    if payloads[1..].iter().any(|p| p.count as usize != n) {
        return Err(Error::Decode("color symbol count differs from point count".into()));
    }
    let maps = PointMaps::new(&coords, models.config().k_first)?;
    let mut features = vec![0u16; 3 * n];
    for (m, rec) in models.colors.iter().zip([c1, c2, c3]) {
        let ch = m.channel();
        let mut decoded = vec![0u16; n];
        let mut source = opts.strategy.color(m, &maps, &features)?;
        decode_stream(
            source.as_mut(),
            payloads[m.feature.index()],
            n,
            |i, s| decoded[i] = s as u16,
            opts.trace.then_some(rec),
        )?;
        drop(source);
        for (row, v) in features.chunks_exact_mut(3).zip(decoded) {
            row[ch] = v;
        }
    }
    Ok((coords, features, cdfs))
}

/// Decodes a serialized bitstream.
pub fn decode_bytes(data: &[u8], models: &ModelBundle, opts: &DecodeOptions) -> Result<Decoded> {
    decode(&Bitstream::from_bytes(data)?, models, opts)
}

pub fn decode(b: &Bitstream, models: &ModelBundle, opts: &DecodeOptions) -> Result<Decoded> {
    let start = Instant::now();
    if b.model_checksum != models.checksum() {
        return Err(Error::ModelMismatch("bitstream was encoded with different models".into()));
    }
    let log2_block = check_models(models, Some(b.log2_block)).map_err(|e| Error::ModelMismatch(e.to_string()))?;
    if b.colorspace != models.colorspace.id() {
        return Err(Error::ModelMismatch("color space differs from the models'".into()));
    }
    let cs = colorspace::by_id(b.colorspace)?;
    let origins = b.origins().map_err(|e| Error::Decode(format!("octree: {e}")))?;
    if origins.len() != b.num_blocks() {
        return Err(Error::Decode("block count differs from octree".into()));
    }
    let results: Vec<_> = pool(opts.workers)?.install(|| {
        (0..origins.len())
            .into_par_iter()
            .map(|i| {
                let p = [&b.payloads[0][i], &b.payloads[1][i], &b.payloads[2][i], &b.payloads[3][i]];
                decode_block(p, models, b.geometry_only, opts)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut blocks = Vec::with_capacity(results.len());
    let mut trace = Trace::default();
    for (&origin, (coords, symbols, cdfs)) in origins.iter().zip(results) {
        let local = if b.geometry_only {
            SparseTensor::geometry_only(coords)?
        } else {
            let rgb = symbols
                .chunks_exact(3)
                .map(|s| cs.inverse([s[0], s[1], s[2]]))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Decode(format!("color: {e}")))?;
            SparseTensor::rgb(coords, &rgb)?
        };
        blocks.push(Block { origin, local });
        trace.blocks.push(cdfs);
    }
    let cloud = if blocks.is_empty() {
        if b.geometry_only {
            SparseTensor::empty()
        } else {
            SparseTensor::rgb(Vec::new(), &[])?
        }
    } else {
        merge_blocks(&blocks, b.n, log2_block)?
    };
    Ok(Decoded {
        cloud,
        n: b.n,
        shift: b.shift,
        trace: opts.trace.then_some(trace),
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests;
