//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::Network;
use super::kernel::KernelMap;
use super::loss::softmax_ce_rows;
use crate::error::Result;

/// Gradients smaller than this are compared absolutely.
pub const DENOM_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Worst relative error over every parameter and every input value of `net`
/// for the scalar loss `Σ r·output` with fixed random weights `r`.
pub fn grad_check(net: &mut Network, inputs: &[Vec<f64>], maps: &[&KernelMap], eps: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let act = net.forward(&refs, maps)?;
    let proj: Vec<f64> = (0..act.values[net.output()].len())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let loss = |net: &Network, inputs: &[&[f64]]| -> Result<f64> {
        let out = net.forward_output(inputs, maps)?;
        Ok(out.iter().zip(&proj).map(|(a, b)| a * b).sum())
    };

    net.zero_grad();
    let input_grads = net.backward(&act, &refs, maps, &proj)?;
    let mut worst: f64 = 0.0;

    for l in 0..net.layers.len() {
        for which in 0..2 {
            let len = net.layers[l].params()[which].len();
            for i in 0..len {
                let analytic = net.layers[l].params()[which].grad[i];
                let orig = net.layers[l].params()[which].value[i];
                net.layers[l].params_mut()[which].value[i] = orig + eps;
                let plus = loss(net, &refs)?;
                net.layers[l].params_mut()[which].value[i] = orig - eps;
                let minus = loss(net, &refs)?;
                net.layers[l].params_mut()[which].value[i] = orig;
                worst = worst.max(relative_error(analytic, (plus - minus) / (2.0 * eps)));
            }
        }
    }

    let mut perturbed: Vec<Vec<f64>> = inputs.to_vec();
    for slot in 0..inputs.len() {
        for i in 0..inputs[slot].len() {
            let orig = inputs[slot][i];
            perturbed[slot][i] = orig + eps;
            let plus = loss(net, &perturbed.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
            perturbed[slot][i] = orig - eps;
            let minus = loss(net, &perturbed.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
            perturbed[slot][i] = orig;
            worst = worst.max(relative_error(input_grads[slot][i], (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// Worst relative error of the mean softmax cross-entropy gradient.
pub fn grad_check_softmax_ce(logits: &[f64], k: usize, targets: &[usize], eps: f64) -> Result<f64> {
    let (_, grad) = softmax_ce_rows(logits, k, targets)?;
    let mut x = logits.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = softmax_ce_rows(&x, k, targets)?.0;
        x[i] = orig - eps;
        let minus = softmax_ce_rows(&x, k, targets)?.0;
        x[i] = orig;
        worst = worst.max(relative_error(grad[i], (plus - minus) / (2.0 * eps)));
    }
    Ok(worst)
}
