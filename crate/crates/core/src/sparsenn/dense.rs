use crate::error::{Error, Result};
use crate::pcloud::VoxelCoord;

fn flat_index(c: VoxelCoord, d: usize) -> Result<usize> {
    if c.max_component() as usize >= d {
        return Err(Error::Range(format!("{c:?} outside a grid of side {d}")));
    }
    Ok((c.x as usize * d + c.y as usize) * d + c.z as usize)
}

/// Scatters `rows × channels` sparse values into a zeroed `d³ × channels` grid.
pub fn sparse_to_dense(coords: &[VoxelCoord], values: &[f64], channels: usize, d: usize) -> Result<Vec<f64>> {
    if values.len() != coords.len() * channels {
        return Err(Error::Shape(format!(
            "{} values for {} rows of {channels}",
            values.len(),
            coords.len()
        )));
    }
    let mut grid = vec![0.0; d * d * d * channels];
    for (row, &c) in coords.iter().enumerate() {
        let at = flat_index(c, d)?;
        grid[at * channels..(at + 1) * channels]
            .copy_from_slice(&values[row * channels..(row + 1) * channels]);
    }
    Ok(grid)
}

/// Gathers grid rows at `coords`. This is also the backward pass of
/// [`sparse_to_dense`]: gradients of empty voxels are dropped.
pub fn dense_to_sparse(coords: &[VoxelCoord], grid: &[f64], channels: usize, d: usize) -> Result<Vec<f64>> {
    if grid.len() != d * d * d * channels {
        return Err(Error::Shape(format!("grid of {} values for side {d}", grid.len())));
    }
    let mut out = Vec::with_capacity(coords.len() * channels);
    for &c in coords {
        let at = flat_index(c, d)?;
        out.extend_from_slice(&grid[at * channels..(at + 1) * channels]);
    }
    Ok(out)
}
