//! Attack objectives evaluated in f64 directly from their definitions.

use crate::ops::softmax;

pub fn cross_entropy(z: &[f64], target: usize) -> f64 {
    -softmax(z)[target].ln()
}

pub fn logit(z: &[f64], target: usize) -> f64 {
    -z[target]
}

pub fn carlini_wagner(z: &[f64], target: usize, confidence: f64) -> f64 {
    let other = z
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    (other - z[target]).max(-confidence)
}

fn l1_normalized(z: &[f64]) -> Vec<f64> {
    let n: f64 = z.iter().map(|v| v.abs()).sum();
    z.iter().map(|v| v / n).collect()
}

/// `1 - |z . e_class| / ||z||_2`.
fn cosine_distance(z: &[f64], class: usize) -> f64 {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    1.0 - z[class].abs() / norm
}

/// Poincare distance of the L1-normalised logits to a shrunken one-hot
/// target plus a clamped triplet term on cosine distances.
pub fn po_trip(z: &[f64], target: usize, original: usize, lambda: f64, gamma: f64, xi: f64) -> f64 {
    let u = l1_normalized(z);
    let mut v = vec![0.0; z.len()];
    v[target] = 1.0 - xi;
    let uu: f64 = u.iter().map(|a| a * a).sum();
    let vv: f64 = v.iter().map(|a| a * a).sum();
    let diff: f64 = u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
    let arg = 1.0 + 2.0 * diff / ((1.0 - uu) * (1.0 - vv));
    let poincare = (arg + (arg * arg - 1.0).sqrt()).ln();
    let triplet = (cosine_distance(z, target) - cosine_distance(z, original) + gamma).max(0.0);
    poincare + lambda * triplet
}
