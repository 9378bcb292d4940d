//! Block partitioning and breadth-first octree signaling of occupied blocks.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::pcloud::{raster_index, to_global, to_local, SparseTensor, VoxelCoord};

pub const DEFAULT_LOG2_BLOCK: u8 = 6;

/// One `d × d × d` coding unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub origin: VoxelCoord,
    /// Points in block-local coordinates.
    pub local: SparseTensor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub n: u8,
    pub log2_block: u8,
    pub blocks: Vec<Block>,
}

impl Partition {
    pub fn block_side(&self) -> u32 {
        1 << self.log2_block
    }

    pub fn origins(&self) -> Vec<VoxelCoord> {
        self.blocks.iter().map(|b| b.origin).collect()
    }

    /// Reassembles the global cloud.
    pub fn merge(&self) -> Result<SparseTensor> {
        merge_blocks(&self.blocks, self.n, self.log2_block)
    }
}

/// Sorts by raster index over the block grid of a `2^n` cloud.
fn origin_key(origin: VoxelCoord, n: u8) -> u64 {
    raster_index(origin, 1u64 << n).expect("origin inside grid")
}

/// Splits `cloud` into its occupied blocks of side `2^log2_block`.
pub fn partition(cloud: &SparseTensor, n: u8, log2_block: u8) -> Result<Partition> {
    if log2_block > n {
        return Err(Error::Config(format!(
            "block size 2^{log2_block} exceeds grid 2^{n}"
        )));
    }
    let d = 1u32 << log2_block;
    let k = cloud.num_columns();
    let mut groups: BTreeMap<u64, (VoxelCoord, Vec<VoxelCoord>, Vec<u16>)> = BTreeMap::new();
    for (i, &c) in cloud.coords().iter().enumerate() {
        if n < 32 && c.max_component() >= 1u32 << n {
            return Err(Error::Range(format!("{c:?} outside grid of bit depth {n}")));
        }
        let (origin, local) = to_local(c, d);
        let g = groups
            .entry(origin_key(origin, n))
            .or_insert_with(|| (origin, Vec::new(), Vec::new()));
        g.1.push(local);
        g.2.extend_from_slice(&cloud.features()[i * k..(i + 1) * k]);
    }
    let blocks = groups
        .into_values()
        .map(|(origin, coords, feats)| {
            Ok(Block {
                origin,
                local: SparseTensor::new(coords, feats, cloud.bitdepths().to_vec())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Partition {
        n,
        log2_block,
        blocks,
    })
}

/// Union of blocks mapped back to global coordinates, raster sorted.
pub fn merge_blocks(blocks: &[Block], n: u8, log2_block: u8) -> Result<SparseTensor> {
    let d = 1u32 << log2_block;
    let bitdepths = blocks
        .first()
        .map(|b| b.local.bitdepths().to_vec())
        .unwrap_or_default();
    let k = bitdepths.len();
    let mut rows: Vec<(VoxelCoord, &[u16])> = Vec::new();
    for b in blocks {
        for (i, &c) in b.local.coords().iter().enumerate() {
            rows.push((to_global(b.origin, c, d, n)?, &b.local.features()[i * k..(i + 1) * k]));
        }
    }
    rows.sort_by_key(|r| r.0);
    let coords = rows.iter().map(|r| r.0).collect();
    let feats = rows.iter().flat_map(|r| r.1.iter().copied()).collect();
    SparseTensor::new(coords, feats, bitdepths)
}

/// Breadth-first child-occupancy bytes locating occupied blocks.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OctreeSignal {
    pub bytes: Vec<u8>,
}

/// Octant index of a child: raster order over the 2×2×2 children, x-major.
fn octant(bx: u32, by: u32, bz: u32) -> u8 {
    ((bx << 2) | (by << 1) | bz) as u8
}

pub fn encode_octree(p: &Partition) -> OctreeSignal {
    encode_origins(&p.origins(), p.n, p.log2_block)
}

/// Serializes a set of block origins. Bit `7 - c` of a node byte marks child `c`.
pub fn encode_origins(origins: &[VoxelCoord], n: u8, log2_block: u8) -> OctreeSignal {
    let levels = n - log2_block;
    if origins.is_empty() || levels == 0 {
        return OctreeSignal::default();
    }
    // Block-grid coordinates of the occupied leaves.
    let leaves: Vec<[u32; 3]> = origins
        .iter()
        .map(|o| [o.x >> log2_block, o.y >> log2_block, o.z >> log2_block])
        .collect();
    let mut bytes = Vec::new();
    // Each queue entry is a node (cell coords at its level) with the leaves under it.
    let mut queue: VecDeque<(u8, Vec<[u32; 3]>)> = VecDeque::new();
    queue.push_back((0, leaves));
    while let Some((level, members)) = queue.pop_front() {
        if level == levels {
            continue;
        }
        let shift = (levels - level - 1) as u32;
        let mut children: [Vec<[u32; 3]>; 8] = Default::default();
        for m in members {
            let c = octant((m[0] >> shift) & 1, (m[1] >> shift) & 1, (m[2] >> shift) & 1);
            children[c as usize].push(m);
        }
        let mut byte = 0u8;
        for (c, ch) in children.iter().enumerate() {
            if !ch.is_empty() {
                byte |= 0x80 >> c;
            }
        }
        bytes.push(byte);
        for ch in children {
            if !ch.is_empty() {
                queue.push_back((level + 1, ch));
            }
        }
    }
    OctreeSignal { bytes }
}

/// Recovers block origins (raster sorted) from a signal.
pub fn decode_octree(s: &OctreeSignal, n: u8, log2_block: u8) -> Result<Vec<VoxelCoord>> {
    if log2_block > n {
        return Err(Error::Config(format!("block size 2^{log2_block} exceeds grid 2^{n}")));
    }
    let levels = n - log2_block;
    if levels == 0 {
        if !s.bytes.is_empty() {
            return Err(Error::CorruptSignal(format!(
                "{} bytes for a single-block grid",
                s.bytes.len()
            )));
        }
        return Ok(vec![VoxelCoord::default()]);
    }
    let mut pos = 0usize;
    let mut frontier = vec![[0u32; 3]];
    for level in 0..levels {
        let mut next = Vec::new();
        for cell in frontier {
            let byte = *s.bytes.get(pos).ok_or_else(|| {
                Error::CorruptSignal(format!("truncated at level {level}, byte {pos}"))
            })?;
            if byte == 0 {
                return Err(Error::CorruptSignal(format!("empty internal node at byte {pos}")));
            }
            pos += 1;
            for c in 0..8u32 {
                if byte & (0x80 >> c) != 0 {
                    next.push([
                        (cell[0] << 1) | (c >> 2),
                        (cell[1] << 1) | ((c >> 1) & 1),
                        (cell[2] << 1) | (c & 1),
                    ]);
                }
            }
        }
        frontier = next;
    }
    if pos != s.bytes.len() {
        return Err(Error::CorruptSignal(format!(
            "{} trailing bytes",
            s.bytes.len() - pos
        )));
    }
    let mut origins: Vec<VoxelCoord> = frontier
        .into_iter()
        .map(|c| VoxelCoord::new(c[0] << log2_block, c[1] << log2_block, c[2] << log2_block))
        .collect();
    origins.sort_by_key(|&o| origin_key(o, n));
    Ok(origins)
}
