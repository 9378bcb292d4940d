use std::f64::consts::LN_2;

use crate::error::{Error, Result};

#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Derivative of ELU expressed through its output.
#[inline]
pub fn elu_grad_from_output(y: f64) -> f64 {
    if y > 0.0 {
        1.0
    } else {
        y + 1.0
    }
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

/// Row-wise softmax of a `rows × k` logit matrix.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    logits.chunks_exact(k).flat_map(softmax).collect()
}

/// `-log2 softmax(logits)[target]`, in bits.
pub fn softmax_ce(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Range(format!(
            "target {target} outside alphabet of {}",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    Ok((lse - logits[target]) / LN_2)
}

/// Mean cross-entropy (bits) over rows, with the gradient w.r.t. the logits.
pub fn softmax_ce_rows(logits: &[f64], k: usize, targets: &[usize]) -> Result<(f64, Vec<f64>)> {
    let rows = targets.len();
    if logits.len() != rows * k {
        return Err(Error::Shape(format!(
            "{} logits for {rows} rows of {k}",
            logits.len()
        )));
    }
    let mut grad = vec![0.0; logits.len()];
    if rows == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    let scale = 1.0 / (rows as f64 * LN_2);
    for ((row, g), &t) in logits.chunks_exact(k).zip(grad.chunks_exact_mut(k)).zip(targets) {
        total += softmax_ce(row, t)?;
        let p = softmax(row);
        for (gv, pv) in g.iter_mut().zip(p) {
            *gv = pv * scale;
        }
        g[t] -= scale;
    }
    Ok((total / rows as f64, grad))
}

/// Argmax-match rate; ties go to the smallest symbol index.
pub fn accuracy(probs: &[f64], k: usize, targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return 1.0;
    }
    let hits = probs
        .chunks_exact(k)
        .zip(targets)
        .filter(|(row, &t)| argmax(row) == t)
        .count();
    hits as f64 / targets.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elu_values() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(elu(2.0), 2.0);
        assert_eq!(elu(f64::NEG_INFINITY), -1.0);
        assert!((elu(-1.0) - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_cost_log2_k() {
        let logits = vec![0.3; 256];
        for t in [0, 17, 255] {
            assert!((softmax_ce(&logits, t).unwrap() - 8.0).abs() < 1e-12);
        }
        assert!(matches!(softmax_ce(&logits, 256), Err(Error::Range(_))));
    }

    #[test]
    fn softmax_rows_normalize() {
        let p = softmax_rows(&[1000.0, -1000.0, 0.0, 1.0, 2.0, 3.0], 3);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_tie_break() {
        let uniform = vec![0.5; 8];
        let targets = [0, 1, 0, 1];
        assert_eq!(accuracy(&uniform, 2, &targets), 0.5);
        assert_eq!(accuracy(&[0.0, 1.0, 1.0, 0.0], 2, &[1, 0]), 1.0);
    }
}
