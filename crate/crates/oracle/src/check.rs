//! Finite-difference checks of the engine's analytic gradients.
//!
//! Each check evaluates a random point with the f32 engine, back-propagates a
//! random linear read-out of the output, and compares every (or a sample of)
//! gradient coordinates against f64 central differences of the reference
//! implementation. Coordinates whose perturbation flips a ReLU or max-pool
//! decision are skipped, since the function is not differentiable across
//! them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transfer_lab::losses::{LossKind, LossSpec, Reduction};
use transfer_lab::models::{Arch, Model};
use transfer_lab::tensor::{Graph, NodeId, PoolKind, Tensor};

use crate::ops::{self, Array, Pattern};

/// Central-difference step.
pub const STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tolerance
    }
}

/// `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE)
}

/// Compare `analytic` against central differences of `f` at `x0` on the
/// given coordinates.
pub fn compare(
    name: &str,
    analytic: &[f32],
    x0: &[f64],
    coords: &[usize],
    f: impl Fn(&[f64]) -> (f64, Pattern),
) -> GradCheck {
    let (_, base) = f(x0);
    let mut numeric = Vec::with_capacity(coords.len());
    let mut skipped = 0;
    for &i in coords {
        let mut x = x0.to_vec();
        x[i] = x0[i] + STEP;
        let (plus, pp) = f(&x);
        x[i] = x0[i] - STEP;
        let (minus, pm) = f(&x);
        if pp != base || pm != base {
            skipped += 1;
            continue;
        }
        numeric.push((i, (plus - minus) / (2.0 * STEP)));
    }
    let max_rel_err = numeric
        .iter()
        .map(|&(i, n)| rel_err(analytic[i] as f64, n))
        .fold(0.0, f64::max);
    GradCheck {
        name: name.to_string(),
        checked: numeric.len(),
        skipped,
        max_rel_err,
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// One operand of a primitive under test.
struct Operand {
    shape: Vec<usize>,
    data: Vec<f32>,
}

type EngineOp = dyn Fn(&mut Graph<'_>, &[NodeId]) -> NodeId;
type ReferenceOp = dyn Fn(&[Array], &mut Pattern) -> Vec<f64>;

/// Check the gradient of `sum(w * op(operands))` w.r.t. every operand.
fn check_op(
    name: &str,
    operands: Vec<Operand>,
    rng: &mut ChaCha8Rng,
    engine: &EngineOp,
    reference: &ReferenceOp,
) -> Vec<GradCheck> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = operands
        .iter()
        .map(|o| g.leaf(Tensor::new(&o.shape, o.data.clone()).expect("valid operand"), true))
        .collect();
    let y = engine(&mut g, &ids);
    let weights = random_vec(rng, g.value(y).len(), -1.0, 1.0);
    let value: f32 = g.value(y).data().iter().zip(&weights).map(|(a, b)| a * b).sum();
    let head = g.head(y, value, weights.clone()).expect("matching read-out");
    let grads = g.backward(head).expect("scalar head");
    let w64 = to_f64(&weights);

    let arrays: Vec<Array> = operands.iter().map(|o| Array::from_f32(&o.shape, &o.data)).collect();
    let mut out = Vec::new();
    for (j, o) in operands.iter().enumerate() {
        let analytic = grads.get(ids[j]).expect("operand gradient");
        let coords: Vec<usize> = (0..o.data.len()).collect();
        let label = if operands.len() > 1 {
            format!("{name}[operand {j}]")
        } else {
            name.to_string()
        };
        out.push(compare(&label, analytic, &arrays[j].data, &coords, |x| {
            let mut args = arrays.clone();
            args[j].data = x.to_vec();
            let mut pattern = Pattern::new();
            let y = reference(&args, &mut pattern);
            (y.iter().zip(&w64).map(|(a, b)| a * b).sum(), pattern)
        }));
    }
    out
}

fn operand(rng: &mut ChaCha8Rng, shape: &[usize]) -> Operand {
    Operand {
        shape: shape.to_vec(),
        data: random_vec(rng, shape.iter().product(), -1.0, 1.0),
    }
}

/// Gradient checks of every graph primitive and every loss head.
pub fn check_primitives(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let r = &mut rng;

    for (stride, pad) in [(1usize, 1usize), (2, 0)] {
        let ops_ = vec![operand(r, &[2, 5, 5]), operand(r, &[3, 2, 3, 3]), operand(r, &[3])];
        out.extend(check_op(
            &format!("conv2d(stride={stride},pad={pad})"),
            ops_,
            r,
            &move |g, ids| g.conv2d_with_bias(ids[0], ids[1], Some(ids[2]), stride, pad).unwrap(),
            &move |a, _| ops::conv2d(&a[0], &a[1], Some(&a[2].data), stride, pad).data,
        ));
    }
    let pw = vec![operand(r, &[3, 4, 4]), operand(r, &[2, 3, 1, 1]), operand(r, &[2])];
    out.extend(check_op(
        "conv2d(1x1)",
        pw,
        r,
        &|g, ids| g.conv2d_with_bias(ids[0], ids[1], Some(ids[2]), 1, 0).unwrap(),
        &|a, _| ops::conv2d(&a[0], &a[1], Some(&a[2].data), 1, 0).data,
    ));
    let d = vec![operand(r, &[6]), operand(r, &[4, 6]), operand(r, &[4])];
    out.extend(check_op(
        "dense",
        d,
        r,
        &|g, ids| g.dense(ids[0], ids[1], Some(ids[2])).unwrap(),
        &|a, _| ops::dense(&a[0].data, &a[1], Some(&a[2].data)),
    ));
    out.extend(check_op(
        "relu",
        vec![operand(r, &[2, 3, 3])],
        r,
        &|g, ids| g.relu(ids[0]),
        &|a, p| ops::relu(&a[0], p).data,
    ));
    for kind in [PoolKind::Max, PoolKind::Avg] {
        for (window, stride) in [(2usize, 2usize), (3, 1)] {
            out.extend(check_op(
                &format!("pool2d({kind:?},w={window},s={stride})"),
                vec![operand(r, &[2, 6, 6])],
                r,
                &move |g, ids| g.pool2d(ids[0], kind, window, stride).unwrap(),
                &move |a, p| ops::pool(&a[0], kind, window, stride, p).data,
            ));
        }
    }
    out.extend(check_op(
        "add",
        vec![operand(r, &[2, 3, 3]), operand(r, &[2, 3, 3])],
        r,
        &|g, ids| g.add(ids[0], ids[1]).unwrap(),
        &|a, _| ops::add(&a[0], &a[1]).data,
    ));
    out.extend(check_op(
        "concat",
        vec![operand(r, &[2, 3, 3]), operand(r, &[1, 3, 3])],
        r,
        &|g, ids| g.concat(ids[0], ids[1], 0).unwrap(),
        &|a, _| ops::concat_channels(&a[0], &a[1]).data,
    ));
    let mean = [0.4f32, 0.5];
    let std = [0.2f32, 0.3];
    out.extend(check_op(
        "normalize",
        vec![operand(r, &[2, 3, 3])],
        r,
        &move |g, ids| g.normalize(ids[0], &mean, &std).unwrap(),
        &move |a, _| ops::normalize(&a[0], &to_f64(&mean), &to_f64(&std)).data,
    ));
    for (size, top, left) in [(6usize, 1usize, 2usize), (8, 0, 0), (5, 3, 0)] {
        out.extend(check_op(
            &format!("resize_pad({size}@{top},{left})"),
            vec![operand(r, &[2, 8, 8])],
            r,
            &move |g, ids| g.resize_pad(ids[0], size, top, left).unwrap(),
            &move |a, _| ops::resize_pad(&a[0], size, top, left).data,
        ));
    }
    out.extend(check_op(
        "reshape",
        vec![operand(r, &[2, 3, 2])],
        r,
        &|g, ids| g.reshape(ids[0], &[3, 4]).unwrap(),
        &|a, _| a[0].data.clone(),
    ));
    out.extend(check_op(
        "mean",
        vec![operand(r, &[5]), operand(r, &[5]), operand(r, &[5])],
        r,
        &|g, ids| g.mean(ids).unwrap(),
        &|a, _| {
            (0..5)
                .map(|i| (a[0].data[i] + a[1].data[i] + a[2].data[i]) / 3.0)
                .collect()
        },
    ));
    out.extend(check_op(
        "softmax",
        vec![operand(r, &[2, 4])],
        r,
        &|g, ids| g.softmax(ids[0]).unwrap(),
        &|a, _| a[0].data.chunks(4).flat_map(ops::softmax).collect(),
    ));
    out.extend(check_op(
        "sum",
        vec![operand(r, &[7])],
        r,
        &|g, ids| g.sum(ids[0]),
        &|a, _| vec![a[0].data.iter().sum()],
    ));
    out.extend(check_losses(r));
    out
}

fn check_losses(rng: &mut ChaCha8Rng) -> Vec<GradCheck> {
    let k = 10;
    let target = rng.random_range(0..k);
    let original = (target + 1 + rng.random_range(0..k - 1)) % k;
    let mut out = Vec::new();
    for kind in LossKind::ALL {
        let spec = LossSpec {
            cw_confidence: 0.5,
            ..LossSpec::new(kind)
        };
        let logits = random_vec(rng, k, -3.0, 3.0);
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_vec(logits.clone()), true);
        let loss = spec
            .apply(&mut g, z, &[target], &[original], Reduction::Sum)
            .expect("valid loss");
        let grads = g.backward(loss.node).expect("scalar loss");
        let spec2 = spec;
        let coords: Vec<usize> = (0..k).collect();
        out.push(compare(
            &format!("loss:{kind}"),
            grads.get(z).expect("logit gradient"),
            &to_f64(&logits),
            &coords,
            move |z| {
                let v = match spec2.kind {
                    LossKind::Ce => crate::losses::cross_entropy(z, target),
                    LossKind::Logit => crate::losses::logit(z, target),
                    LossKind::Cw => crate::losses::carlini_wagner(z, target, spec2.cw_confidence as f64),
                    LossKind::PoTrip => crate::losses::po_trip(
                        z,
                        target,
                        original,
                        spec2.lambda as f64,
                        spec2.gamma as f64,
                        spec2.xi as f64,
                    ),
                };
                // the C&W hinge and its inner max are kinks; encode which
                // branch is active
                let mut p = Pattern::new();
                if spec2.kind == LossKind::Cw {
                    let best = (0..z.len()).filter(|&j| j != target).fold(usize::MAX, |b, j| {
                        if b == usize::MAX || z[j] > z[b] {
                            j
                        } else {
                            b
                        }
                    });
                    p.push(best as u32);
                    p.push((z[best] - z[target] > -(spec2.cw_confidence as f64)) as u32);
                }
                (v, p)
            },
        ));
    }
    out
}

/// Input-gradient check of a freshly initialised `arch` on a random
/// `[3, size, size]` image, over `coords` sampled pixels.
pub fn check_architecture(arch: Arch, seed: u64, size: usize, coords: usize) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
    let model = Model::new(arch, 3, 10, seed).expect("valid architecture");
    let pixels = random_vec(&mut rng, 3 * size * size, 0.0, 1.0);
    let weights = random_vec(&mut rng, 10, -1.0, 1.0);

    let image = Tensor::new(&[3, size, size], pixels.clone()).expect("image shape");
    let mut g = Graph::new();
    let x = g.leaf(image, true);
    let (logits, _) = model.forward(&mut g, x, false).expect("forward");
    let value: f32 = g.value(logits).data().iter().zip(&weights).map(|(a, b)| a * b).sum();
    let head = g.head(logits, value, weights.clone()).expect("read-out");
    let grads = g.backward(head).expect("scalar");
    let analytic = grads.get(x).expect("input gradient").to_vec();

    let n = pixels.len();
    let picks: Vec<usize> = (0..coords).map(|_| rng.random_range(0..n)).collect();
    let w64 = to_f64(&weights);
    compare(&format!("{arch}"), &analytic, &to_f64(&pixels), &picks, |x| {
        let (z, pattern) = crate::forward(&model, &Array::new(&[3, size, size], x.to_vec()));
        (z.iter().zip(&w64).map(|(a, b)| a * b).sum(), pattern)
    })
}
