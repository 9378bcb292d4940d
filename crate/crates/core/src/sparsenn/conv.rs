use rand::Rng;

use super::kernel::{allowed_offsets, check_kernel, mask_offsets, KernelMap, Mask};
use crate::error::{Error, Result};

/// A trainable array with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(len: usize) -> Self {
        Param {
            value: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Sparse convolution parameters.
///
/// Weights are laid out `[offset][c_in][c_out]`, offsets in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub mask: Mask,
    pub weight: Param,
    pub bias: Param,
    allowed: Vec<usize>,
}

impl Conv {
    pub fn new(k: usize, c_in: usize, c_out: usize, mask: Mask) -> Result<Self> {
        check_kernel(k)?;
        let allowed = allowed_offsets(k, mask);
        if allowed.is_empty() {
            return Err(Error::Config(format!("kernel {k} with mask {mask:?} has no taps")));
        }
        Ok(Conv {
            k,
            c_in,
            c_out,
            mask,
            weight: Param::zeros(k * k * k * c_in * c_out),
            bias: Param::zeros(c_out),
            allowed,
        })
    }

    /// Offsets that carry weights, ascending.
    pub fn allowed(&self) -> &[usize] {
        &self.allowed
    }

    pub fn fan_in(&self) -> usize {
        self.allowed.len() * self.c_in
    }

    /// Centered uniform weights scaled by `1/sqrt(fan_in)`, zero bias.
    pub fn init_uniform(&mut self, rng: &mut impl Rng) {
        let bound = 1.0 / (self.fan_in() as f64).sqrt();
        for w in &mut self.weight.value {
            *w = rng.gen_range(-bound..bound);
        }
        self.bias.value.iter_mut().for_each(|b| *b = 0.0);
        self.apply_mask();
    }

    pub fn zero_params(&mut self) {
        self.weight.value.iter_mut().for_each(|w| *w = 0.0);
        self.bias.value.iter_mut().for_each(|b| *b = 0.0);
    }

    /// Zeroes every weight slice of a masked offset.
    pub fn apply_mask(&mut self) {
        let slice = self.c_in * self.c_out;
        for off in mask_offsets(self.k, self.mask) {
            self.weight.value[off * slice..(off + 1) * slice]
                .iter_mut()
                .for_each(|w| *w = 0.0);
        }
    }

    fn check_map(&self, map: &KernelMap) -> Result<()> {
        if map.kernel_size() != self.k {
            return Err(Error::Shape(format!(
                "kernel map of size {} used with a {} kernel",
                map.kernel_size(),
                self.k
            )));
        }
        Ok(())
    }

    /// Output row `o`: bias plus the masked taps, summed offset by offset and
    /// channel by channel in ascending order. Every code path that produces
    /// an output row goes through here, so results are bitwise reproducible
    /// whether rows are computed all at once or one at a time.
    #[inline]
    pub fn forward_row(&self, map: &KernelMap, src: &[f64], o: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.bias.value);
        let slice = self.c_in * self.c_out;
        for &off in &self.allowed {
            if let Some(i) = map.neighbor(o, off) {
                let x = &src[i * self.c_in..(i + 1) * self.c_in];
                let w = &self.weight.value[off * slice..(off + 1) * slice];
                for (ci, &xv) in x.iter().enumerate() {
                    let wrow = &w[ci * self.c_out..(ci + 1) * self.c_out];
                    for (acc, &wv) in out.iter_mut().zip(wrow) {
                        *acc += xv * wv;
                    }
                }
            }
        }
    }

    /// Full sparse convolution over every output row of `map`.
    pub fn forward(&self, map: &KernelMap, src: &[f64]) -> Result<Vec<f64>> {
        self.check_map(map)?;
        if !src.len().is_multiple_of(self.c_in.max(1)) {
            return Err(Error::Shape(format!(
                "input of length {} is not a multiple of {} channels",
                src.len(),
                self.c_in
            )));
        }
        let mut out = vec![0.0; map.n_out() * self.c_out];
        for (o, row) in out.chunks_exact_mut(self.c_out).enumerate() {
            self.forward_row(map, src, o, row);
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and returns-by-accumulation the input
    /// gradient into `grad_src`.
    pub fn backward(&mut self, map: &KernelMap, src: &[f64], grad_out: &[f64], grad_src: &mut [f64]) {
        let slice = self.c_in * self.c_out;
        for (o, g) in grad_out.chunks_exact(self.c_out).enumerate() {
            for (b, &gv) in self.bias.grad.iter_mut().zip(g) {
                *b += gv;
            }
            for &off in &self.allowed {
                let Some(i) = map.neighbor(o, off) else {
                    continue;
                };
                let x = &src[i * self.c_in..(i + 1) * self.c_in];
                let gx = &mut grad_src[i * self.c_in..(i + 1) * self.c_in];
                let w = &self.weight.value[off * slice..(off + 1) * slice];
                let gw = &mut self.weight.grad[off * slice..(off + 1) * slice];
                for ci in 0..self.c_in {
                    let wrow = &w[ci * self.c_out..(ci + 1) * self.c_out];
                    let gwrow = &mut gw[ci * self.c_out..(ci + 1) * self.c_out];
                    let xv = x[ci];
                    let mut acc = 0.0;
                    for c in 0..self.c_out {
                        gwrow[c] += xv * g[c];
                        acc += wrow[c] * g[c];
                    }
                    gx[ci] += acc;
                }
            }
        }
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcloud::VoxelCoord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel() {
        let coords = [VoxelCoord::new(0, 0, 0), VoxelCoord::new(2, 1, 0)];
        let map = KernelMap::build(&coords, &coords, 1).unwrap();
        let mut conv = Conv::new(1, 2, 2, Mask::None).unwrap();
        conv.weight.value = vec![1.0, 0.0, 0.0, 1.0];
        let x = [0.5, -1.0, 3.0, 4.0];
        assert_eq!(conv.forward(&map, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn mask_zeroes_future_slices() {
        let mut conv = Conv::new(3, 2, 3, Mask::TypeA).unwrap();
        conv.init_uniform(&mut ChaCha8Rng::seed_from_u64(0));
        for off in 13..27 {
            assert!(conv.weight.value[off * 6..(off + 1) * 6].iter().all(|&w| w == 0.0));
        }
        assert!(conv.weight.value[..13 * 6].iter().any(|&w| w != 0.0));
        assert!(Conv::new(1, 1, 1, Mask::TypeA).is_err());
    }

    #[test]
    fn kernel_size_mismatch() {
        let map = KernelMap::build(&[], &[], 3).unwrap();
        let conv = Conv::new(1, 1, 1, Mask::None).unwrap();
        assert!(matches!(conv.forward(&map, &[]), Err(Error::Shape(_))));
    }
}
