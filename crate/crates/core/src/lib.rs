//! Learned lossless point cloud codec.
//!
//! Voxelized clouds are split into blocks. Inside each block, occupancy and
//! then three color channels are coded symbol by symbol in raster order,
//! with probabilities from causally masked sparse convolutional networks
//! and a deterministic range coder.

pub mod blocktree;
pub mod codec;
pub mod colorspace;
pub mod error;
pub mod models;
pub mod pcloud;
pub mod rangecoder;
pub mod selftest;
pub mod sparsenn;
pub mod trainer;

pub use error::{Error, Result};
