//! Serialized layout, little-endian:
//!
//! ```text
//! "CNET" | version u8 | n u8 | log2_block u8 | flags u8 | shift 3 × i32
//! | model checksum [8] | octree length u32 | octree bytes
//! | 4 × (per block: payload length u32 | symbol count u32 | payload)
//! ```
//!
//! Flags: bit 0 color space id, bit 1 geometry only, bit 2 empty cloud.
//! The four groups are occupancy then the three color channels in coding
//! order; each holds one entry per block in block order.

use crate::blocktree::{decode_octree, OctreeSignal};
use crate::error::{Error, Result};
use crate::pcloud::{VoxelCoord, MAX_BIT_DEPTH};

pub const MAGIC: &[u8; 4] = b"CNET";
pub const VERSION: u8 = 1;

const FLAG_COLORSPACE: u8 = 1;
const FLAG_GEOMETRY_ONLY: u8 = 2;
const FLAG_EMPTY: u8 = 4;

/// Size of everything before the octree bytes.
pub const FIXED_HEADER_BYTES: usize = 4 + 4 + 12 + 8 + 4;
/// Per-block, per-feature framing.
pub const BLOCK_FRAME_BYTES: usize = 8;

/// One block's range-coded symbols of one feature.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BlockPayload {
    pub count: u32,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub n: u8,
    pub log2_block: u8,
    pub colorspace: u8,
    pub geometry_only: bool,
    pub empty: bool,
    pub shift: [i32; 3],
    pub model_checksum: [u8; 8],
    pub octree: OctreeSignal,
    pub payloads: [Vec<BlockPayload>; 4],
}

impl Bitstream {
    pub fn num_blocks(&self) -> usize {
        self.payloads[0].len()
    }

    /// Occupied points across all blocks, from the stored counts.
    pub fn num_points(&self) -> u64 {
        self.payloads[0].iter().map(|p| p.count as u64).sum()
    }

    pub fn flags(&self) -> u8 {
        let mut f = self.colorspace & FLAG_COLORSPACE;
        if self.geometry_only {
            f |= FLAG_GEOMETRY_ONLY;
        }
        if self.empty {
            f |= FLAG_EMPTY;
        }
        f
    }

    /// Block origins recovered from the octree signal.
    pub fn origins(&self) -> Result<Vec<VoxelCoord>> {
        if self.empty {
            return Ok(Vec::new());
        }
        decode_octree(&self.octree, self.n, self.log2_block)
    }

    pub fn len_bytes(&self) -> usize {
        FIXED_HEADER_BYTES
            + self.octree.bytes.len()
            + self
                .payloads
                .iter()
                .flatten()
                .map(|p| BLOCK_FRAME_BYTES + p.bytes.len())
                .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[VERSION, self.n, self.log2_block, self.flags()]);
        for s in self.shift {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&self.model_checksum);
        out.extend_from_slice(&(self.octree.bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.octree.bytes);
        for group in &self.payloads {
            for p in group {
                out.extend_from_slice(&(p.bytes.len() as u32).to_le_bytes());
                out.extend_from_slice(&p.count.to_le_bytes());
                out.extend_from_slice(&p.bytes);
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Cursor { data, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Decode("bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Decode(format!("unsupported version {version}")));
        }
        let n = r.u8()?;
        let log2_block = r.u8()?;
        let flags = r.u8()?;
        if flags & !(FLAG_COLORSPACE | FLAG_GEOMETRY_ONLY | FLAG_EMPTY) != 0 {
            return Err(Error::Decode(format!("unknown flag bits {flags:#04x}")));
        }
        if n > MAX_BIT_DEPTH || log2_block > n || log2_block == 0 {
            return Err(Error::Decode(format!("bit depth {n} with block log2 {log2_block}")));
        }
        let mut shift = [0i32; 3];
        for s in &mut shift {
            *s = i32::from_le_bytes(r.take(4)?.try_into().unwrap());
        }
        let model_checksum: [u8; 8] = r.take(8)?.try_into().unwrap();
        let octree_len = r.u32()? as usize;
        let octree = OctreeSignal {
            bytes: r.take(octree_len)?.to_vec(),
        };
        let mut b = Bitstream {
            n,
            log2_block,
            colorspace: flags & FLAG_COLORSPACE,
            geometry_only: flags & FLAG_GEOMETRY_ONLY != 0,
            empty: flags & FLAG_EMPTY != 0,
            shift,
            model_checksum,
            octree,
            payloads: Default::default(),
        };
        if b.empty && !b.octree.bytes.is_empty() {
            return Err(Error::Decode("empty cloud with octree bytes".into()));
        }
        let blocks = b
            .origins()
            .map_err(|e| Error::Decode(format!("octree: {e}")))?
            .len();
        for group in &mut b.payloads {
            for _ in 0..blocks {
                let len = r.u32()? as usize;
                let count = r.u32()?;
                group.push(BlockPayload {
                    count,
                    bytes: r.take(len)?.to_vec(),
                });
            }
        }
        if r.pos != data.len() {
            return Err(Error::Decode(format!("{} trailing bytes", data.len() - r.pos)));
        }
        Ok(b)
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Decode(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
