//! Static computation graphs over sparse tensors.
//!
//! A [`Network`] is a list of nodes in topological order plus the conv
//! layers they use. Kernel maps are supplied per evaluation, so one network
//! runs over any block geometry.
//!
//! Nodes reachable from a causal input are evaluated row by row in
//! [`Network::forward_row`]; all other nodes are computed up front by
//! [`Network::prepare_rows`]. Both paths use the same per-row kernels as
//! [`Network::forward`], which is what makes sequential decoding reproduce
//! a single full pass bit for bit.

use super::conv::{Conv, Param};
use super::kernel::{KernelMap, Mask};
use super::loss::{elu, elu_grad_from_output};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Input { slot: usize, causal: bool },
    Conv { src: NodeId, layer: usize, map: usize },
    Elu { src: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Scatter of a sparse tensor onto a dense grid through a `k = 1` map
    /// whose output rows are the grid voxels. Empty voxels read zero.
    ToDense { src: NodeId, map: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    nodes: Vec<Node>,
    widths: Vec<usize>,
    causal: Vec<bool>,
    pub layers: Vec<Conv>,
    output: NodeId,
    num_inputs: usize,
}

/// Incremental graph construction.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    widths: Vec<usize>,
    causal: Vec<bool>,
    layers: Vec<Conv>,
    num_inputs: usize,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, node: Node, width: usize, causal: bool) -> NodeId {
        self.nodes.push(node);
        self.widths.push(width);
        self.causal.push(causal);
        self.nodes.len() - 1
    }

    pub fn input(&mut self, width: usize, causal: bool) -> NodeId {
        let slot = self.num_inputs;
        self.num_inputs += 1;
        self.push(Node::Input { slot, causal }, width, causal)
    }

    pub fn conv(&mut self, src: NodeId, k: usize, c_out: usize, mask: Mask, map: usize) -> Result<NodeId> {
        let c_in = self.widths[src];
        let causal = self.causal[src];
        if causal && mask == Mask::None {
            return Err(Error::Config("unmasked convolution on a causal path".into()));
        }
        self.layers.push(Conv::new(k, c_in, c_out, mask)?);
        let layer = self.layers.len() - 1;
        Ok(self.push(Node::Conv { src, layer, map }, c_out, causal))
    }

    pub fn elu(&mut self, src: NodeId) -> NodeId {
        self.push(Node::Elu { src }, self.widths[src], self.causal[src])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.widths[a] != self.widths[b] {
            return Err(Error::Shape(format!(
                "adding widths {} and {}",
                self.widths[a], self.widths[b]
            )));
        }
        Ok(self.push(Node::Add { a, b }, self.widths[a], self.causal[a] || self.causal[b]))
    }

    /// Conv followed by ELU.
    pub fn conv_elu(&mut self, src: NodeId, k: usize, c_out: usize, mask: Mask, map: usize) -> Result<NodeId> {
        let c = self.conv(src, k, c_out, mask, map)?;
        Ok(self.elu(c))
    }

    /// `x + elu(conv1(elu(conv3(elu(conv1(x))))))`; middle kernel is 3.
    pub fn residual(&mut self, x: NodeId, mask: Mask, map_k1: usize, map_k3: usize) -> Result<NodeId> {
        let w = self.widths[x];
        let h = self.conv_elu(x, 1, w, mask, map_k1)?;
        let h = self.conv_elu(h, 3, w, mask, map_k3)?;
        let h = self.conv_elu(h, 1, w, mask, map_k1)?;
        self.add(x, h)
    }

    pub fn to_dense(&mut self, src: NodeId, map: usize) -> NodeId {
        self.push(Node::ToDense { src, map }, self.widths[src], self.causal[src])
    }

    pub fn finish(self, output: NodeId) -> Network {
        Network {
            nodes: self.nodes,
            widths: self.widths,
            causal: self.causal,
            layers: self.layers,
            output,
            num_inputs: self.num_inputs,
        }
    }
}

/// Per-node values of one evaluation.
#[derive(Debug, Clone)]
pub struct Activations {
    pub values: Vec<Vec<f64>>,
    rows: Vec<usize>,
}

impl Activations {
    pub fn rows(&self, node: NodeId) -> usize {
        self.rows[node]
    }
}

impl Network {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn output_width(&self) -> usize {
        self.widths[self.output]
    }

    pub fn width(&self, node: NodeId) -> usize {
        self.widths[node]
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut())
    }

    pub fn num_params(&self) -> usize {
        self.params().map(Param::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Param::zero_grad);
    }

    pub fn apply_masks(&mut self) {
        self.layers.iter_mut().for_each(Conv::apply_mask);
    }

    fn row_counts(&self, inputs: &[&[f64]], maps: &[&KernelMap]) -> Result<Vec<usize>> {
        if inputs.len() != self.num_inputs {
            return Err(Error::Shape(format!(
                "{} inputs given, network takes {}",
                inputs.len(),
                self.num_inputs
            )));
        }
        let mut rows = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let r = match *node {
                Node::Input { slot, .. } => {
                    let w = self.widths[id];
                    if w == 0 || inputs[slot].len() % w != 0 {
                        return Err(Error::Shape(format!(
                            "input {slot} has {} values for width {w}",
                            inputs[slot].len()
                        )));
                    }
                    inputs[slot].len() / w
                }
                Node::Conv { map, layer, .. } => {
                    let m = maps.get(map).ok_or_else(|| Error::Shape(format!("missing kernel map {map}")))?;
                    if m.kernel_size() != self.layers[layer].k {
                        return Err(Error::Shape(format!(
                            "layer {layer} has kernel {} but map {map} has {}",
                            self.layers[layer].k,
                            m.kernel_size()
                        )));
                    }
                    m.n_out()
                }
                Node::ToDense { map, .. } => {
                    let m = maps.get(map).ok_or_else(|| Error::Shape(format!("missing kernel map {map}")))?;
                    if m.kernel_size() != 1 {
                        return Err(Error::Shape("dense scatter needs a k = 1 map".into()));
                    }
                    m.n_out()
                }
                Node::Elu { src } => rows[src],
                Node::Add { a, b } => {
                    if rows[a] != rows[b] {
                        return Err(Error::Shape(format!(
                            "adding {} rows to {} rows",
                            rows[a], rows[b]
                        )));
                    }
                    rows[a]
                }
            };
            rows.push(r);
        }
        Ok(rows)
    }

    /// Computes one row of a non-input node from already-computed sources.
    #[inline]
    fn eval_row(&self, id: NodeId, row: usize, values: &mut [Vec<f64>], inputs: &[&[f64]], maps: &[&KernelMap]) {
        let w = self.widths[id];
        let (before, rest) = values.split_at_mut(id);
        let out = &mut rest[0][row * w..(row + 1) * w];
        let src_vals = |n: NodeId| -> &[f64] {
            match self.nodes[n] {
                Node::Input { slot, .. } => inputs[slot],
                _ => &before[n],
            }
        };
        match self.nodes[id] {
            Node::Input { .. } => unreachable!("inputs are not evaluated"),
            Node::Conv { src, layer, map } => {
                self.layers[layer].forward_row(maps[map], src_vals(src), row, out);
            }
            Node::Elu { src } => {
                let s = &src_vals(src)[row * w..(row + 1) * w];
                for (o, &x) in out.iter_mut().zip(s) {
                    *o = elu(x);
                }
            }
            Node::Add { a, b } => {
                let sa = &src_vals(a)[row * w..(row + 1) * w];
                let sb = &src_vals(b)[row * w..(row + 1) * w];
                for ((o, &x), &y) in out.iter_mut().zip(sa).zip(sb) {
                    *o = x + y;
                }
            }
            Node::ToDense { src, map } => match maps[map].neighbor(row, 0) {
                Some(i) => out.copy_from_slice(&src_vals(src)[i * w..(i + 1) * w]),
                None => out.iter_mut().for_each(|v| *v = 0.0),
            },
        }
    }

    /// Evaluates every node over every row.
    pub fn forward(&self, inputs: &[&[f64]], maps: &[&KernelMap]) -> Result<Activations> {
        let rows = self.row_counts(inputs, maps)?;
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for id in 0..self.nodes.len() {
            let len = match self.nodes[id] {
                Node::Input { .. } => 0,
                _ => rows[id] * self.widths[id],
            };
            values.push(vec![0.0; len]);
            if !matches!(self.nodes[id], Node::Input { .. }) {
                for r in 0..rows[id] {
                    self.eval_row(id, r, &mut values, inputs, maps);
                }
            }
        }
        Ok(Activations { values, rows })
    }

    /// Output node values of a full pass.
    pub fn forward_output(&self, inputs: &[&[f64]], maps: &[&KernelMap]) -> Result<Vec<f64>> {
        let mut act = self.forward(inputs, maps)?;
        Ok(std::mem::take(&mut act.values[self.output]))
    }

    /// Allocates buffers for row-wise evaluation and computes every node that
    /// does not depend on a causal input. Causal nodes must all share one row
    /// space of `rows` rows.
    pub fn prepare_rows(&self, inputs: &[&[f64]], maps: &[&KernelMap], rows: usize) -> Result<Activations> {
        let counts = self.row_counts(inputs, maps)?;
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for id in 0..self.nodes.len() {
            let is_input = matches!(self.nodes[id], Node::Input { .. });
            if self.causal[id] && !is_input && counts[id] != rows {
                return Err(Error::Shape(format!(
                    "causal node {id} has {} rows, expected {rows}",
                    counts[id]
                )));
            }
            values.push(vec![0.0; if is_input { 0 } else { counts[id] * self.widths[id] }]);
            if !is_input && !self.causal[id] {
                for r in 0..counts[id] {
                    self.eval_row(id, r, &mut values, inputs, maps);
                }
            }
        }
        Ok(Activations { values, rows: counts })
    }

    /// Evaluates all causal nodes at `row`. Rows before `row` must already
    /// have been evaluated, and every input row a masked tap can reach from
    /// `row` must be final.
    pub fn forward_row(&self, act: &mut Activations, inputs: &[&[f64]], maps: &[&KernelMap], row: usize) {
        for id in 0..self.nodes.len() {
            if self.causal[id] && !matches!(self.nodes[id], Node::Input { .. }) {
                self.eval_row(id, row, &mut act.values, inputs, maps);
            }
        }
    }

    pub fn output_row<'a>(&self, act: &'a Activations, row: usize) -> &'a [f64] {
        let w = self.widths[self.output];
        &act.values[self.output][row * w..(row + 1) * w]
    }

    /// Backpropagates `grad_output` (gradient of the loss w.r.t. the output
    /// node) into parameter gradients. Returns gradients w.r.t. each input.
    pub fn backward(
        &mut self,
        act: &Activations,
        inputs: &[&[f64]],
        maps: &[&KernelMap],
        grad_output: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        let n = self.nodes.len();
        let mut grads: Vec<Vec<f64>> = (0..n)
            .map(|id| vec![0.0; act.rows[id] * self.widths[id]])
            .collect();
        if grad_output.len() != grads[self.output].len() {
            return Err(Error::Shape(format!(
                "output gradient of length {} for {} values",
                grad_output.len(),
                grads[self.output].len()
            )));
        }
        grads[self.output].copy_from_slice(grad_output);
        let mut input_grads = vec![Vec::new(); self.num_inputs];
        for id in (0..n).rev() {
            let g = std::mem::take(&mut grads[id]);
            match self.nodes[id] {
                Node::Input { slot, .. } => input_grads[slot] = g,
                Node::Conv { src, layer, map } => {
                    let src_vals: &[f64] = match self.nodes[src] {
                        Node::Input { slot, .. } => inputs[slot],
                        _ => &act.values[src],
                    };
                    self.layers[layer].backward(maps[map], src_vals, &g, &mut grads[src]);
                }
                Node::Elu { src } => {
                    for ((gs, &gy), &y) in grads[src].iter_mut().zip(&g).zip(&act.values[id]) {
                        *gs += gy * elu_grad_from_output(y);
                    }
                }
                Node::Add { a, b } => {
                    for (ga, &gy) in grads[a].iter_mut().zip(&g) {
                        *ga += gy;
                    }
                    for (gb, &gy) in grads[b].iter_mut().zip(&g) {
                        *gb += gy;
                    }
                }
                Node::ToDense { src, map } => {
                    let w = self.widths[id];
                    for (r, gr) in g.chunks_exact(w).enumerate() {
                        if let Some(i) = maps[map].neighbor(r, 0) {
                            for (gs, &gv) in grads[src][i * w..(i + 1) * w].iter_mut().zip(gr) {
                                *gs += gv;
                            }
                        }
                    }
                }
            }
        }
        Ok(input_grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcloud::VoxelCoord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_coords(rng: &mut ChaCha8Rng, n: usize, d: u32) -> Vec<VoxelCoord> {
        let mut c: Vec<VoxelCoord> = (0..n)
            .map(|_| VoxelCoord::new(rng.gen_range(0..d), rng.gen_range(0..d), rng.gen_range(0..d)))
            .collect();
        c.sort();
        c.dedup();
        c
    }

    fn causal_net(rng: &mut ChaCha8Rng) -> Network {
        let mut b = GraphBuilder::new();
        let x = b.input(1, true);
        let ctx = b.input(2, false);
        let h = b.conv_elu(x, 3, 4, Mask::TypeA, 1).unwrap();
        let h = b.residual(h, Mask::TypeB, 0, 1).unwrap();
        let c = b.conv_elu(ctx, 3, 4, Mask::None, 1).unwrap();
        let m = b.add(h, c).unwrap();
        let out = b.conv(m, 1, 3, Mask::TypeB, 0).unwrap();
        let mut net = b.finish(out);
        for l in &mut net.layers {
            l.init_uniform(rng);
        }
        net
    }

    #[test]
    fn row_wise_matches_full_pass_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = causal_net(&mut rng);
        let coords = random_coords(&mut rng, 60, 5);
        let owned = [
            KernelMap::build(&coords, &coords, 1).unwrap(),
            KernelMap::build(&coords, &coords, 3).unwrap(),
        ];
        let maps: Vec<&KernelMap> = owned.iter().collect();
        let x: Vec<f64> = coords.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ctx: Vec<f64> = (0..coords.len() * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let full = net.forward_output(&[&x, &ctx], &maps).unwrap();

        // Row-wise with the history revealed one row at a time.
        let mut partial = vec![0.0; x.len()];
        let mut act = net.prepare_rows(&[&partial, &ctx], &maps, coords.len()).unwrap();
        let mut rowwise = Vec::new();
        for r in 0..coords.len() {
            net.forward_row(&mut act, &[&partial, &ctx], &maps, r);
            rowwise.extend_from_slice(net.output_row(&act, r));
            partial[r] = x[r];
        }
        assert_eq!(full.len(), rowwise.len());
        assert!(full.iter().zip(&rowwise).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn unmasked_causal_conv_rejected() {
        let mut b = GraphBuilder::new();
        let x = b.input(1, true);
        assert!(b.conv(x, 3, 2, Mask::None, 0).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = causal_net(&mut rng);
        let coords = random_coords(&mut rng, 10, 4);
        let owned = [
            KernelMap::build(&coords, &coords, 1).unwrap(),
            KernelMap::build(&coords, &coords, 3).unwrap(),
        ];
        let maps: Vec<&KernelMap> = owned.iter().collect();
        let x = vec![0.0; coords.len()];
        let ctx = vec![0.0; coords.len() * 2 + 1];
        assert!(matches!(net.forward(&[&x, &ctx], &maps), Err(Error::Shape(_))));
        assert!(matches!(net.forward(&[&x], &maps), Err(Error::Shape(_))));
        assert!(matches!(net.forward(&[&x, &x], &maps[..1]), Err(Error::Shape(_))));
    }

    #[test]
    fn residual_with_zero_weights_is_identity() {
        let mut b = GraphBuilder::new();
        let x = b.input(3, false);
        let y = b.residual(x, Mask::TypeB, 0, 1).unwrap();
        let net = b.finish(y);
        let coords = [VoxelCoord::new(0, 0, 0), VoxelCoord::new(0, 1, 0)];
        let owned = [
            KernelMap::build(&coords, &coords, 1).unwrap(),
            KernelMap::build(&coords, &coords, 3).unwrap(),
        ];
        let maps: Vec<&KernelMap> = owned.iter().collect();
        let input = [0.3, -2.0, 5.0, -0.1, 0.0, 1.0];
        assert_eq!(net.forward_output(&[&input], &maps).unwrap(), input.to_vec());
    }
}
