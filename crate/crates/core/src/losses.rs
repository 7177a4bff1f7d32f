//! Targeted attack objectives over a logit vector.
//!
//! All four losses are minimised by the attack. Values and logit-gradients are
//! computed analytically in `f64` and attached to the graph as a scalar head,
//! so [`Graph::backward`](crate::tensor::Graph::backward) carries them down to
//! the input image.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{softmax_f64, Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Cross-entropy on the target class.
    Ce,
    /// Negative target logit.
    Logit,
    /// Targeted Carlini-Wagner hinge with confidence `K`.
    Cw,
    /// Poincaré distance plus triplet loss.
    PoTrip,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Ce, LossKind::Logit, LossKind::PoTrip, LossKind::Cw];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Logit => "logit",
            LossKind::Cw => "cw",
            LossKind::PoTrip => "po_trip",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "logit" => Ok(LossKind::Logit),
            "cw" => Ok(LossKind::Cw),
            "po_trip" => Ok(LossKind::PoTrip),
            other => Err(Error::usage(format!(
                "unknown loss '{other}' (expected ce, logit, cw, po_trip)"
            ))),
        }
    }
}

/// Loss selection and its hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// C&W confidence `K`.
    pub cw_confidence: f32,
    /// Weight of the triplet term in Po+Trip.
    pub lambda: f32,
    /// Triplet margin.
    pub gamma: f32,
    /// Stability constant.
    pub xi: f32,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::new(LossKind::Logit)
    }
}

/// Per-sample loss values and the scalar node to differentiate.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub node: NodeId,
    pub per_sample: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            cw_confidence: 0.0,
            lambda: 0.01,
            gamma: 0.007,
            xi: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cw_confidence >= 0.0) {
            return Err(Error::usage("C&W confidence K must be >= 0"));
        }
        if !(self.xi > 0.0) {
            return Err(Error::usage("xi must be > 0"));
        }
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::usage("lambda and gamma must be >= 0"));
        }
        Ok(())
    }

    /// Loss value and gradient w.r.t. the logits for one sample.
    pub fn evaluate(&self, logits: &[f32], target: usize, original: usize) -> Result<(f64, Vec<f32>)> {
        if target >= logits.len() {
            return Err(Error::usage(format!(
                "target {target} out of range for {} classes",
                logits.len()
            )));
        }
        match self.kind {
            LossKind::Ce => Ok(cross_entropy(logits, target)),
            LossKind::Logit => Ok(logit(logits, target)),
            LossKind::Cw => Ok(carlini_wagner(logits, target, self.cw_confidence)),
            LossKind::PoTrip => po_trip(logits, target, original, self.lambda, self.gamma, self.xi),
        }
    }

    /// Attach the loss over `[k]` or `[B, k]` logits to the graph.
    pub fn apply(
        &self,
        graph: &mut Graph<'_>,
        logits: NodeId,
        targets: &[usize],
        originals: &[usize],
        reduction: Reduction,
    ) -> Result<LossOutput> {
        let shape = graph.shape(logits).to_vec();
        let (rows, k) = match *shape.as_slice() {
            [k] => (1, k),
            [b, k] => (b, k),
            _ => return Err(Error::shape(format!("loss expects [k] or [B,k] logits, got {shape:?}"))),
        };
        if targets.len() != rows || (self.kind == LossKind::PoTrip && originals.len() != rows) {
            return Err(Error::shape(format!(
                "{rows} logit rows but {} targets / {} originals",
                targets.len(),
                originals.len()
            )));
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / rows as f64,
        };
        let mut total = 0.0f64;
        let mut per_sample = Vec::with_capacity(rows);
        let mut grad = Vec::with_capacity(rows * k);
        let values = graph.value(logits).data();
        for (r, row) in values.chunks(k).enumerate() {
            let original = originals.get(r).copied().unwrap_or(usize::MAX);
            let (v, g) = self.evaluate(row, targets[r], original)?;
            total += v;
            per_sample.push(v as f32);
            if reduction == Reduction::Mean {
                grad.extend(g.iter().map(|&x| (x as f64 * scale) as f32));
            } else {
                grad.extend(g);
            }
        }
        let node = graph.head(logits, (total * scale) as f32, grad)?;
        Ok(LossOutput { node, per_sample })
    }
}

fn onehot_grad(k: usize, target: usize, value: f32) -> Vec<f32> {
    let mut g = vec![0.0; k];
    g[target] = value;
    g
}

/// `-log softmax(z)[t]`; gradient `softmax(z) - onehot(t)`.
pub fn cross_entropy(logits: &[f32], target: usize) -> (f64, Vec<f32>) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z as f64));
    let lse = max + logits.iter().map(|&z| (z as f64 - max).exp()).sum::<f64>().ln();
    let value = lse - logits[target] as f64;
    let mut p = softmax_f64(logits);
    p[target] -= 1.0;
    (value, p.into_iter().map(|v| v as f32).collect())
}

/// `-z_t`; gradient exactly `-onehot(t)`.
pub fn logit(logits: &[f32], target: usize) -> (f64, Vec<f32>) {
    (-(logits[target] as f64), onehot_grad(logits.len(), target, -1.0))
}

/// `max(max_{j != t} z_j - z_t, -K)`.
pub fn carlini_wagner(logits: &[f32], target: usize, confidence: f32) -> (f64, Vec<f32>) {
    let mut best: Option<usize> = None;
    for (j, &z) in logits.iter().enumerate() {
        if j != target && best.is_none_or(|b| z > logits[b]) {
            best = Some(j);
        }
    }
    let other = best.expect("at least two classes");
    let margin = logits[other] as f64 - logits[target] as f64;
    let floor = -(confidence as f64);
    let mut grad = vec![0.0; logits.len()];
    if margin > floor {
        grad[other] = 1.0;
        grad[target] = -1.0;
        (margin, grad)
    } else {
        (floor, grad)
    }
}

/// Poincaré distance between the L1-normalised logits and a softened one-hot
/// target, plus `lambda` times a cosine-distance triplet term pushing away
/// from the original class.
pub fn po_trip(
    logits: &[f32],
    target: usize,
    original: usize,
    lambda: f32,
    gamma: f32,
    xi: f32,
) -> Result<(f64, Vec<f32>)> {
    if original >= logits.len() {
        return Err(Error::usage("po_trip needs a valid original class"));
    }
    if original == target {
        return Err(Error::usage("po_trip needs target != original class"));
    }
    let (po, mut grad) = poincare(logits, target, xi as f64)?;
    let (trip, tgrad) = triplet(logits, target, original, gamma as f64, xi as f64);
    let lambda = lambda as f64;
    for (g, t) in grad.iter_mut().zip(tgrad) {
        *g += lambda * t;
    }
    Ok((po + lambda * trip, grad.into_iter().map(|g| g as f32).collect()))
}

fn poincare(logits: &[f32], target: usize, xi: f64) -> Result<(f64, Vec<f64>)> {
    let l: Vec<f64> = logits.iter().map(|&z| z as f64).collect();
    let raw_l1: f64 = l.iter().map(|v| v.abs()).sum();
    let l1 = raw_l1.max(xi);
    let u: Vec<f64> = l.iter().map(|v| v / l1).collect();
    let u_sq: f64 = u.iter().map(|v| v * v).sum();
    let b = 1.0 - u_sq;
    if b <= 0.0 {
        return Err(Error::Numerical(format!(
            "normalised logits have ||u||_2 = {} >= 1",
            u_sq.sqrt()
        )));
    }
    // v = max(onehot(t) - xi, 0): target entry 1 - xi, zeros elsewhere.
    let vt = 1.0 - xi;
    let c = 2.0 * xi - xi * xi;
    let a: f64 = u
        .iter()
        .enumerate()
        .map(|(j, &uj)| {
            let d = if j == target { uj - vt } else { uj };
            d * d
        })
        .sum();
    let delta = 2.0 * a / (b * c);
    let value = (1.0 + delta).acosh();

    let d_value = 1.0 / (delta * (delta + 2.0)).sqrt().max(f64::MIN_POSITIVE);
    // d delta / d u_j = (4 / c) * ((u_j - v_j) / b + a * u_j / b^2)
    let g_u: Vec<f64> = u
        .iter()
        .enumerate()
        .map(|(j, &uj)| {
            let diff = if j == target { uj - vt } else { uj };
            d_value * (4.0 / c) * (diff / b + a * uj / (b * b))
        })
        .collect();
    let grad = if raw_l1 > xi {
        let dot: f64 = g_u.iter().zip(&l).map(|(g, v)| g * v).sum();
        g_u.iter()
            .zip(&l)
            .map(|(g, v)| g / l1 - sgn(*v) * dot / (l1 * l1))
            .collect()
    } else {
        g_u.iter().map(|g| g / l1).collect()
    };
    Ok((value, grad))
}

/// Cosine distance `1 - |z_y| / ||z||_2` and its gradient.
fn cosine_distance(l: &[f64], y: usize, norm: f64, guarded: bool) -> (f64, Vec<f64>) {
    let zy = l[y];
    let value = 1.0 - zy.abs() / norm;
    let grad = l
        .iter()
        .enumerate()
        .map(|(j, &lj)| {
            let direct = if j == y { -sgn(zy) / norm } else { 0.0 };
            let through_norm = if guarded { 0.0 } else { zy.abs() * lj / norm.powi(3) };
            direct + through_norm
        })
        .collect();
    (value, grad)
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn triplet(logits: &[f32], target: usize, original: usize, gamma: f64, xi: f64) -> (f64, Vec<f64>) {
    let l: Vec<f64> = logits.iter().map(|&z| z as f64).collect();
    let raw = l.iter().map(|v| v * v).sum::<f64>().sqrt();
    let guarded = raw <= xi;
    let norm = raw.max(xi);
    let (dt, gt) = cosine_distance(&l, target, norm, guarded);
    let (d_o, go) = cosine_distance(&l, original, norm, guarded);
    let hinge = dt - d_o + gamma;
    if hinge > 0.0 {
        (hinge, gt.iter().zip(&go).map(|(a, b)| a - b).collect())
    } else {
        (0.0, vec![0.0; l.len()])
    }
}

/// `D(l, y)` from the triplet term, exposed for property tests.
pub fn triplet_distance(logits: &[f32], class: usize, xi: f32) -> f64 {
    let l: Vec<f64> = logits.iter().map(|&z| z as f64).collect();
    let norm = l.iter().map(|v| v * v).sum::<f64>().sqrt().max(xi as f64);
    cosine_distance(&l, class, norm, false).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{softmax, Tensor};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn ce_examples() {
        let (v, g) = cross_entropy(&[0.0, 0.0], 0);
        assert!(close(v, std::f64::consts::LN_2, 1e-12));
        assert_eq!(g, vec![-0.5, 0.5]);
        let (v, g) = cross_entropy(&[10.0, 0.0], 0);
        assert!(close(v, 4.54e-5, 1e-7), "{v}");
        assert!(close(g[0] as f64, -4.54e-5, 1e-7), "{}", g[0]);
    }

    #[test]
    fn logit_examples() {
        let (v, g) = logit(&[3.2, -1.0], 0);
        assert_eq!(v as f32, -3.2);
        assert_eq!(g, vec![-1.0, 0.0]);
        // ten unit ascent steps on z_t lower the loss by exactly ten
        let start = logit(&[3.0, 0.0], 0).0;
        let end = logit(&[13.0, 0.0], 0).0;
        assert_eq!(start - end, 10.0);
    }

    #[test]
    fn cw_examples() {
        assert_eq!(carlini_wagner(&[2.0, 5.0, 1.0], 0, 0.0).0, 3.0);
        assert_eq!(carlini_wagner(&[9.0, 1.0, 1.0], 0, 0.0).0, 0.0);
        assert_eq!(carlini_wagner(&[9.0, 1.0, 1.0], 0, 10.0).0, -8.0);
        assert_eq!(carlini_wagner(&[2.0, 5.0, 1.0], 0, 0.0).1, vec![-1.0, 1.0, 0.0]);
        assert_eq!(carlini_wagner(&[9.0, 1.0, 1.0], 0, 0.0).1, vec![0.0; 3]);
    }

    #[test]
    fn poincare_example() {
        let xi = 1e-5f64;
        let delta = 2.0 * ((0.5 - (1.0 - xi)).powi(2) + 0.25) / (0.5 * (1.0 - (1.0 - xi).powi(2)));
        let expected = (1.0 + delta).acosh();
        let (v, _) = po_trip(&[1.0, 1.0], 0, 1, 0.0, 0.007, 1e-5).unwrap();
        assert!(close(v, expected, 1e-6 * expected), "{v} vs {expected}");
        assert!(close(v, 12.21, 0.01));
    }

    #[test]
    fn triplet_example_is_inactive() {
        let (v, g) = triplet(&[3.0, 1.0], 0, 1, 0.007, 1e-5);
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(close(
            triplet_distance(&[3.0, 1.0], 0, 1e-5),
            1.0 - 3.0 / 10f64.sqrt(),
            1e-12
        ));
        assert!(close(
            triplet_distance(&[3.0, 1.0], 1, 1e-5),
            1.0 - 1.0 / 10f64.sqrt(),
            1e-12
        ));
    }

    #[test]
    fn po_trip_domain_errors() {
        assert!(matches!(
            po_trip(&[5.0, 0.0, 0.0], 1, 0, 0.01, 0.007, 1e-5),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(
            po_trip(&[1.0, 2.0], 0, 0, 0.01, 0.007, 1e-5),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn po_trip_gradient_matches_central_differences() {
        let logits = [0.7f32, -1.3, 2.1, 0.4];
        let (_, g) = po_trip(&logits, 1, 2, 0.5, 0.3, 1e-5).unwrap();
        let f = |z: &[f64]| {
            let zf: Vec<f32> = z.iter().map(|&v| v as f32).collect();
            po_trip(&zf, 1, 2, 0.5, 0.3, 1e-5).unwrap().0
        };
        let base: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        for j in 0..4 {
            let h = 1e-3;
            let mut p = base.clone();
            p[j] += h;
            let mut m = base.clone();
            m[j] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let rel = (fd - g[j] as f64).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-3, "coord {j}: fd {fd} analytic {}", g[j]);
        }
    }

    #[test]
    fn graph_head_backpropagates_loss_gradient() {
        let mut graph = Graph::new();
        let z = graph.leaf(Tensor::from_vec(vec![1.0, -2.0, 0.5]), true);
        let out = LossSpec::new(LossKind::Logit)
            .apply(&mut graph, z, &[2], &[0], Reduction::Sum)
            .unwrap();
        let grads = graph.backward(out.node).unwrap();
        assert_eq!(grads.get(z).unwrap(), &[0.0, 0.0, -1.0]);
        assert_eq!(out.per_sample, vec![-0.5]);
    }

    proptest! {
        #[test]
        fn losses_are_finite_and_bounded(
            logits in proptest::collection::vec(-30.0f32..30.0, 2..12),
            t in 0usize..12,
            k in 0.0f32..20.0,
        ) {
            let n = logits.len();
            let t = t % n;
            let o = (t + 1) % n;
            let (ce, gce) = cross_entropy(&logits, t);
            prop_assert!(ce.is_finite() && ce >= 0.0);
            let p = softmax(&logits);
            for j in 0..n {
                let expect = p[j] - if j == t { 1.0 } else { 0.0 };
                prop_assert!((gce[j] - expect).abs() <= 1e-6);
            }
            prop_assert!((gce[t].abs() as f64 - (1.0 - p[t] as f64)).abs() < 1e-6);
            let (cw, _) = carlini_wagner(&logits, t, k);
            prop_assert!(cw >= -(k as f64));
            let (trip, _) = triplet(&logits, t, o, 0.007, 1e-5);
            prop_assert!(trip >= 0.0);
            for class in [t, o] {
                let d = triplet_distance(&logits, class, 1e-5);
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&d));
            }
            if let Ok((po, g)) = po_trip(&logits, t, o, 0.01, 0.007, 1e-5) {
                prop_assert!(po.is_finite() && po >= 0.0);
                prop_assert!(g.iter().all(|v| v.is_finite()));
            }
        }

        #[test]
        fn ce_target_gradient_shrinks_as_target_logit_grows(
            others in proptest::collection::vec(-5.0f32..5.0, 1..6),
            z in -5.0f32..5.0,
        ) {
            let mut lo = vec![z];
            lo.extend(&others);
            let mut hi = lo.clone();
            hi[0] = z + 0.5;
            let g_lo = cross_entropy(&lo, 0).1[0].abs();
            let g_hi = cross_entropy(&hi, 0).1[0].abs();
            prop_assert!(g_hi < g_lo);
        }
    }
}
