//! Iterative targeted sign-gradient attack with composable transfer methods.
//!
//! Each iteration optionally resizes-and-pads the current image (diverse
//! inputs), runs the source ensemble, back-propagates the chosen loss to the
//! pixels, optionally smooths that gradient with a Gaussian window
//! (translation invariance), optionally folds it into an L1-normalised
//! momentum buffer, then takes a signed step and projects back into the
//! epsilon ball and the valid pixel range.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec, Reduction};
use crate::models::Model;
use crate::tensor::kernels::{conv2d_forward, ConvGeometry, ResizePad};
use crate::tensor::{sign, softmax, Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Linf,
    L2,
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        })
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" => Ok(Norm::Linf),
            "l2" => Ok(Norm::L2),
            _ => Err(Error::usage(format!("unknown norm '{s}' (valid: linf, l2)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zero,
    Gaussian { sigma: f32 },
}

/// Random resize-and-pad settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiConfig {
    pub prob: f64,
    /// Inclusive range of resized side lengths.
    pub low: usize,
    pub high: usize,
}

impl Default for DiConfig {
    fn default() -> Self {
        Self {
            prob: 0.7,
            low: 29,
            high: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub loss: LossSpec,
    /// Ball radius in `[0, 1]` pixel units.
    pub epsilon: f32,
    pub alpha: f32,
    pub iterations: usize,
    /// Iterations (1-based) after which the current image is snapshotted.
    pub checkpoints: Vec<usize>,
    /// Momentum decay; `None` disables momentum.
    pub momentum: Option<f32>,
    /// Side length of the gradient smoothing window; `None` disables it.
    pub ti_kernel: Option<usize>,
    pub di: Option<DiConfig>,
    pub norm: Norm,
    /// Skip the ball projection, keeping only the pixel-range clip.
    pub unbounded: bool,
    pub init: Init,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::new(LossSpec::new(LossKind::Ce))
    }
}

impl AttackConfig {
    /// Defaults: 16/255 ball, 2/255 steps, 300 iterations with snapshots at
    /// 20, 100 and 300, and all three transfer methods enabled.
    pub fn new(loss: LossSpec) -> Self {
        Self {
            loss,
            epsilon: 16.0 / 255.0,
            alpha: 2.0 / 255.0,
            iterations: 300,
            checkpoints: vec![20, 100, 300],
            momentum: Some(1.0),
            ti_kernel: Some(5),
            di: Some(DiConfig::default()),
            norm: Norm::Linf,
            unbounded: false,
            init: Init::Zero,
            seed: 0,
        }
    }

    /// Settings for unconstrained runs: no ball, gaussian start, no momentum.
    pub fn unbounded(loss: LossSpec) -> Self {
        Self {
            unbounded: true,
            init: Init::Gaussian { sigma: 0.1 },
            momentum: None,
            ..Self::new(loss)
        }
    }

    /// Plain iterative sign descent with no transfer methods.
    pub fn plain(loss: LossSpec) -> Self {
        Self {
            momentum: None,
            ti_kernel: None,
            di: None,
            ..Self::new(loss)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::usage("step size must be positive"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::usage("epsilon must be >= 0"));
        }
        if self.iterations == 0 {
            return Err(Error::usage("iterations must be >= 1"));
        }
        if let Some(&bad) = self.checkpoints.iter().find(|&&c| c == 0 || c > self.iterations) {
            return Err(Error::usage(format!(
                "checkpoint {bad} outside [1, {}]",
                self.iterations
            )));
        }
        if let Some(mu) = self.momentum {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(Error::usage("momentum decay must be >= 0"));
            }
        }
        if let Some(k) = self.ti_kernel {
            if k == 0 || k % 2 == 0 {
                return Err(Error::usage(format!(
                    "smoothing kernel size must be odd and >= 1, got {k}"
                )));
            }
        }
        if let Some(di) = &self.di {
            if !(0.0..=1.0).contains(&di.prob) {
                return Err(Error::usage("resize probability must lie in [0, 1]"));
            }
            if di.low == 0 || di.low > di.high {
                return Err(Error::usage(format!("invalid resize band [{}, {}]", di.low, di.high)));
            }
        }
        if let Init::Gaussian { sigma } = self.init {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::usage("init sigma must be >= 0"));
            }
        }
        Ok(())
    }

    /// Enabled transfer methods, e.g. `MI+TI+DI`, or `none`.
    pub fn methods(&self) -> String {
        let mut parts = Vec::new();
        if self.momentum.is_some() {
            parts.push("MI");
        }
        if self.ti_kernel.is_some() {
            parts.push("TI");
        }
        if self.di.is_some() {
            parts.push("DI");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// Per-iteration measurements, taken on the input the gradient was computed
/// from.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub loss: f64,
    /// L1 norm of the raw pixel gradient, before smoothing or momentum.
    pub grad_l1: f64,
    pub target_logit: f32,
    pub target_prob: f32,
    pub target_rank: usize,
    pub zero_grad: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    /// `(iteration, image)` snapshots in ascending iteration order.
    pub checkpoints: Vec<(usize, Tensor)>,
    pub trajectory: Vec<IterationRecord>,
    pub final_image: Tensor,
    pub seed: u64,
}

impl AttackResult {
    pub fn checkpoint(&self, iteration: usize) -> Option<&Tensor> {
        self.checkpoints.iter().find(|(i, _)| *i == iteration).map(|(_, t)| t)
    }

    pub fn zero_grad_events(&self) -> usize {
        self.trajectory.iter().filter(|r| r.zero_grad).count()
    }
}

/// Normalised Gaussian window of side `size` with sigma `size / 3`.
pub fn make_ti_kernel(size: usize) -> Result<Tensor> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::usage(format!(
            "smoothing kernel size must be odd and >= 1, got {size}"
        )));
    }
    let sigma = size as f64 / 3.0;
    let half = (size / 2) as f64;
    let mut w = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - half, x as f64 - half);
            w.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    Tensor::new(&[size, size], w.into_iter().map(|v| (v / total) as f32).collect())
}

/// Same-size per-channel convolution of a `[C, H, W]` gradient with a
/// square kernel, zero padded.
pub fn ti_smooth(grad: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = grad.shape() else {
        return Err(Error::shape(format!(
            "expected a [C,H,W] gradient, got {:?}",
            grad.shape()
        )));
    };
    let k = kernel.shape()[0];
    if kernel.shape() != [k, k] || k.is_multiple_of(2) {
        return Err(Error::shape(format!(
            "expected an odd square kernel, got {:?}",
            kernel.shape()
        )));
    }
    if k == 1 {
        let s = kernel.data()[0];
        return Tensor::new(grad.shape(), grad.data().iter().map(|v| v * s).collect());
    }
    let geom = ConvGeometry {
        c_in: 1,
        h,
        w,
        c_out: 1,
        kh: k,
        kw: k,
        stride: 1,
        padding: k / 2,
    };
    let mut out = vec![0.0f32; c * h * w];
    for (src, dst) in grad.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        conv2d_forward(src, kernel.data(), None, &geom, dst);
    }
    Tensor::new(grad.shape(), out)
}

/// One diverse-input draw. Always consumes the same randomness regardless of
/// whether the transform is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiDraw {
    pub apply: bool,
    pub size: usize,
    pub top: usize,
    pub left: usize,
}

pub fn draw_di(rng: &mut impl Rng, di: &DiConfig, h: usize, w: usize) -> Result<DiDraw> {
    if di.low == 0 || di.low > di.high || di.high > h.min(w) {
        return Err(Error::usage(format!(
            "resize band [{}, {}] does not fit {h}x{w}",
            di.low, di.high
        )));
    }
    let apply = rng.random::<f64>() < di.prob;
    let size = rng.random_range(di.low..=di.high);
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    Ok(DiDraw { apply, size, top, left })
}

/// Randomly shrink `image` (`[C, H, W]`) and pad it back with zeros.
pub fn di_transform(image: &Tensor, di: &DiConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(format!(
            "expected a [C,H,W] image, got {:?}",
            image.shape()
        )));
    };
    let draw = draw_di(rng, di, h, w)?;
    if !draw.apply {
        return Ok(image.clone());
    }
    let spec = ResizePad {
        channels: c,
        h,
        w,
        size: draw.size,
        top: draw.top,
        left: draw.left,
    };
    let mut out = vec![0.0; image.len()];
    spec.forward(image.data(), &mut out);
    Tensor::new(image.shape(), out)
}

/// `mu * prev + grad / |grad|_1`. A zero gradient leaves `mu * prev` and
/// reports `true`.
pub fn mi_accumulate(prev: &Tensor, grad: &Tensor, mu: f32) -> Result<(Tensor, bool)> {
    if prev.shape() != grad.shape() {
        return Err(Error::shape(format!(
            "momentum {:?} vs gradient {:?}",
            prev.shape(),
            grad.shape()
        )));
    }
    let l1 = grad.l1_norm();
    let zero = l1 == 0.0;
    let data = prev
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&p, &g)| {
            let n = if zero { 0.0 } else { (g as f64 / l1) as f32 };
            mu * p + n
        })
        .collect();
    Ok((Tensor::new(prev.shape(), data)?, zero))
}

/// Step against `dir` and project into the feasible set.
pub fn step_and_project(current: &Tensor, original: &Tensor, dir: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    if current.shape() != original.shape() || current.shape() != dir.shape() {
        return Err(Error::shape("image, original and direction shapes differ"));
    }
    let eps = cfg.epsilon;
    let mut next: Vec<f32> = match cfg.norm {
        Norm::Linf => current
            .data()
            .iter()
            .zip(dir.data())
            .map(|(&x, &d)| x - cfg.alpha * sign(d))
            .collect(),
        Norm::L2 => {
            let n = dir.l2_norm();
            let scale = if n > 0.0 { (cfg.alpha as f64 / n) as f32 } else { 0.0 };
            current
                .data()
                .iter()
                .zip(dir.data())
                .map(|(&x, &d)| x - scale * d)
                .collect()
        }
    };
    if !cfg.unbounded {
        project(&mut next, original.data(), eps, cfg.norm);
    }
    next.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(current.shape(), next)
}

fn project(x: &mut [f32], original: &[f32], eps: f32, norm: Norm) {
    match norm {
        Norm::Linf => {
            for (v, &o) in x.iter_mut().zip(original) {
                *v = v.clamp(o - eps, o + eps);
            }
        }
        Norm::L2 => {
            let dist = x
                .iter()
                .zip(original)
                .map(|(&v, &o)| ((v - o) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if dist > eps as f64 {
                let s = (eps as f64 / dist) as f32;
                for (v, &o) in x.iter_mut().zip(original) {
                    *v = o + (*v - o) * s;
                }
            }
        }
    }
}

fn check_ensemble(models: &[&Model]) -> Result<usize> {
    let first = models.first().ok_or_else(|| Error::usage("no source models"))?;
    let k = first.num_classes();
    if let Some(bad) = models.iter().find(|m| m.num_classes() != k) {
        return Err(Error::usage(format!(
            "ensemble mixes {k}-class and {}-class models",
            bad.num_classes()
        )));
    }
    Ok(k)
}

/// Equal-weight mean of the models' logits on one `[C, H, W]` image.
pub fn ensemble_logits(models: &[&Model], image: &Tensor) -> Result<Vec<f32>> {
    check_ensemble(models)?;
    let mut acc: Vec<f32> = models[0].logits(image)?;
    for m in &models[1..] {
        acc.iter_mut().zip(m.logits(image)?).for_each(|(a, b)| *a += b);
    }
    if models.len() > 1 {
        let n = models.len() as f32;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    Ok(acc)
}

/// 1 + number of classes with a strictly larger logit.
pub fn target_rank(logits: &[f32], target: usize) -> usize {
    1 + logits.iter().filter(|&&z| z > logits[target]).count()
}

const INIT_STREAM: u64 = u64::MAX;

/// Run the attack on one `[C, H, W]` image.
pub fn attack(
    models: &[&Model],
    image: &Tensor,
    target: usize,
    original: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let k = check_ensemble(models)?;
    if target >= k {
        return Err(Error::usage(format!("target {target} out of range for {k} classes")));
    }
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(format!(
            "expected a [C,H,W] image, got {:?}",
            image.shape()
        )));
    };
    if c != models[0].in_channels() {
        return Err(Error::shape(format!(
            "image has {c} channels, model expects {}",
            models[0].in_channels()
        )));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::usage("image pixels must lie in [0, 1]"));
    }
    if let Some(di) = &cfg.di {
        if di.high > h.min(w) {
            return Err(Error::usage(format!(
                "resize band upper bound {} exceeds {h}x{w}",
                di.high
            )));
        }
    }
    let kernel = cfg.ti_kernel.map(make_ti_kernel).transpose()?;

    let mut x = initial_image(image, cfg)?;
    let mut momentum = Tensor::zeros(image.shape());
    let mut trajectory = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::new();

    for i in 0..cfg.iterations {
        let draw = match &cfg.di {
            Some(di) => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(i as u64);
                Some(draw_di(&mut rng, di, h, w)?)
            }
            None => None,
        };
        let (grad, mut record) = gradient(models, &x, target, original, cfg, draw)?;

        let grad = match &kernel {
            Some(kernel) => ti_smooth(&grad, kernel)?,
            None => grad,
        };
        let dir = match cfg.momentum {
            Some(mu) => {
                let (next, zero) = mi_accumulate(&momentum, &grad, mu)?;
                record.zero_grad |= zero;
                momentum = next;
                &momentum
            }
            None => &grad,
        };
        if record.zero_grad {
            log::debug!("iteration {i}: zero input gradient");
        }
        x = step_and_project(&x, image, dir, cfg)?;
        trajectory.push(record);
        if cfg.checkpoints.contains(&(i + 1)) {
            checkpoints.push((i + 1, x.clone()));
        }
    }
    checkpoints.sort_by_key(|(i, _)| *i);
    checkpoints.dedup_by_key(|(i, _)| *i);
    Ok(AttackResult {
        checkpoints,
        trajectory,
        final_image: x,
        seed: cfg.seed,
    })
}

/// Starting point: the clean image, or a gaussian-perturbed copy projected
/// into the feasible set.
pub fn initial_image(image: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    match cfg.init {
        Init::Zero => Ok(image.clone()),
        Init::Gaussian { sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(INIT_STREAM);
            let normal = Normal::new(0.0f32, sigma).map_err(|e| Error::usage(e.to_string()))?;
            let mut x: Vec<f32> = image.data().iter().map(|&v| v + normal.sample(&mut rng)).collect();
            if !cfg.unbounded {
                project(&mut x, image.data(), cfg.epsilon, cfg.norm);
            }
            x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            Tensor::new(image.shape(), x)
        }
    }
}

fn gradient(
    models: &[&Model],
    x: &Tensor,
    target: usize,
    original: usize,
    cfg: &AttackConfig,
    draw: Option<DiDraw>,
) -> Result<(Tensor, IterationRecord)> {
    let mut graph = Graph::new();
    let leaf = graph.leaf(x.clone(), true);
    let input = match draw {
        Some(d) if d.apply => graph.resize_pad(leaf, d.size, d.top, d.left)?,
        _ => leaf,
    };
    let mut outs = Vec::with_capacity(models.len());
    for m in models {
        outs.push(m.forward(&mut graph, input, false)?.0);
    }
    let logits = if outs.len() == 1 { outs[0] } else { graph.mean(&outs)? };
    let out = cfg
        .loss
        .apply(&mut graph, logits, &[target], &[original], Reduction::Sum)?;
    let z = graph.value(logits).data().to_vec();
    let mut grads = graph.backward(out.node)?;
    let g = grads.take(leaf).unwrap_or_else(|| vec![0.0; x.len()]);
    let grad = Tensor::new(x.shape(), g)?;
    let grad_l1 = grad.l1_norm();
    if !grad_l1.is_finite() {
        return Err(Error::Numerical("non-finite input gradient".into()));
    }
    let record = IterationRecord {
        loss: out.per_sample[0] as f64,
        grad_l1,
        target_logit: z[target],
        target_prob: softmax(&z)[target],
        target_rank: target_rank(&z, target),
        zero_grad: grad_l1 == 0.0,
    };
    Ok((grad, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Arch};

    fn approx(a: f32, b: f32) -> bool {
        (a - b).abs() < 1e-6
    }

    #[test]
    fn ti_kernel_properties() {
        assert_eq!(make_ti_kernel(1).unwrap().data(), &[1.0]);
        assert!(make_ti_kernel(4).is_err());
        for size in [3, 5, 7] {
            let k = make_ti_kernel(size).unwrap();
            let d = k.data();
            assert!((d.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            for y in 0..size {
                for x in 0..size {
                    assert!(approx(d[y * size + x], d[y * size + size - 1 - x]));
                    assert!(approx(d[y * size + x], d[(size - 1 - y) * size + x]));
                }
            }
            let center = d[size * size / 2];
            assert!(d.iter().all(|&v| v <= center));
        }
    }

    #[test]
    fn ti_smooth_spreads_an_impulse() {
        let mut g = Tensor::zeros(&[1, 5, 5]);
        g.data_mut()[12] = 1.0;
        let uniform = Tensor::full(&[3, 3], 1.0 / 9.0);
        let out = ti_smooth(&g, &uniform).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..=3).contains(&y) && (1..=3).contains(&x);
                let expect = if inside { 1.0 / 9.0 } else { 0.0 };
                assert!(approx(out.data()[y * 5 + x], expect));
            }
        }
        let sum: f32 = out.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        let id = ti_smooth(&g, &make_ti_kernel(1).unwrap()).unwrap();
        assert_eq!(id, g);
    }

    #[test]
    fn di_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::new(&[3, 32, 32], (0..3072).map(|i| (i % 255) as f32 / 255.0).collect()).unwrap();
        let off = DiConfig {
            prob: 0.0,
            ..DiConfig::default()
        };
        for _ in 0..20 {
            assert_eq!(di_transform(&img, &off, &mut rng).unwrap(), img);
        }
        let full = DiConfig {
            prob: 1.0,
            low: 32,
            high: 32,
        };
        assert_eq!(di_transform(&img, &full, &mut rng).unwrap(), img);
    }

    #[test]
    fn di_keeps_shape_and_pads_with_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::full(&[3, 32, 32], 0.8);
        let di = DiConfig {
            prob: 1.0,
            low: 29,
            high: 32,
        };
        for _ in 0..100 {
            let mut probe = rng.clone();
            let draw = draw_di(&mut probe, &di, 32, 32).unwrap();
            let out = di_transform(&img, &di, &mut rng).unwrap();
            assert_eq!(out.shape(), &[3, 32, 32]);
            for y in 0..32 {
                for x in 0..32 {
                    let inside = (draw.top..draw.top + draw.size).contains(&y)
                        && (draw.left..draw.left + draw.size).contains(&x);
                    let v = out.data()[y * 32 + x];
                    if inside {
                        assert!(approx(v, 0.8));
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn momentum_examples() {
        let zero = Tensor::zeros(&[2]);
        let (g1, z) = mi_accumulate(&zero, &Tensor::from_vec(vec![2.0, -2.0]), 1.0).unwrap();
        assert!(!z);
        assert_eq!(g1.data(), &[0.5, -0.5]);
        let (g2, _) = mi_accumulate(&g1, &Tensor::from_vec(vec![4.0, 4.0]), 1.0).unwrap();
        assert_eq!(g2.data(), &[1.0, 0.0]);
        let (g3, z) = mi_accumulate(&g2, &Tensor::zeros(&[2]), 0.5).unwrap();
        assert!(z);
        assert_eq!(g3.data(), &[0.5, 0.0]);
    }

    #[test]
    fn step_examples() {
        let cfg = AttackConfig::default();
        let half = Tensor::scalar(0.5);
        let up = step_and_project(&half, &half, &Tensor::scalar(-1.0), &cfg).unwrap();
        assert!(approx(up.data()[0], 0.5 + 2.0 / 255.0));
        let far = Tensor::scalar(0.9);
        let p = step_and_project(&far, &half, &Tensor::scalar(0.0), &cfg).unwrap();
        assert!(approx(p.data()[0], 0.5 + 16.0 / 255.0));
        let low = Tensor::scalar(0.0);
        let c = step_and_project(&low, &low, &Tensor::scalar(1.0), &cfg).unwrap();
        assert_eq!(c.data()[0], 0.0);
        let free = AttackConfig {
            unbounded: true,
            ..AttackConfig::default()
        };
        let u = step_and_project(&far, &half, &Tensor::scalar(-1.0), &free).unwrap();
        assert!(approx(u.data()[0], 0.9 + 2.0 / 255.0));
    }

    #[test]
    fn l2_step_stays_in_ball() {
        let cfg = AttackConfig {
            norm: Norm::L2,
            epsilon: 0.1,
            alpha: 0.5,
            ..AttackConfig::default()
        };
        let x = Tensor::full(&[4], 0.5);
        let out = step_and_project(&x, &x, &Tensor::from_vec(vec![1.0, -2.0, 0.5, 0.0]), &cfg).unwrap();
        let dist: f32 = out.data().iter().map(|v| (v - 0.5).powi(2)).sum::<f32>().sqrt();
        assert!((dist - 0.1).abs() < 1e-5);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig::default();
        cfg.validate().unwrap();
        cfg.checkpoints = vec![301];
        assert!(cfg.validate().is_err());
        let cfg = AttackConfig {
            ti_kernel: Some(4),
            ..AttackConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AttackConfig {
            alpha: 0.0,
            ..AttackConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(AttackConfig::default().methods(), "MI+TI+DI");
        assert_eq!(AttackConfig::plain(LossSpec::new(LossKind::Logit)).methods(), "none");
        let u = AttackConfig::unbounded(LossSpec::new(LossKind::Logit));
        assert!(u.unbounded && u.momentum.is_none());
    }

    #[test]
    fn ensemble_mean_and_rank() {
        let m = build_model(Arch::MiniVgg, 10, 0).unwrap();
        let img = Tensor::full(&[3, 32, 32], 0.3);
        let single = ensemble_logits(&[&m], &img).unwrap();
        assert_eq!(single, m.logits(&img).unwrap());
        let triple = ensemble_logits(&[&m, &m, &m], &img).unwrap();
        for (a, b) in single.iter().zip(&triple) {
            assert!((a - b).abs() < 1e-5);
        }
        let other = build_model(Arch::MiniVgg, 5, 0).unwrap();
        assert!(matches!(ensemble_logits(&[&m, &other], &img), Err(Error::Usage(_))));
        assert_eq!(target_rank(&[5.0, 3.0, 1.0], 1), 2);
    }

    fn short_cfg(iterations: usize) -> AttackConfig {
        AttackConfig {
            iterations,
            checkpoints: vec![],
            seed: 11,
            ..AttackConfig::new(LossSpec::new(LossKind::Logit))
        }
    }

    #[test]
    fn attack_respects_ball_and_is_deterministic() {
        let m = build_model(Arch::MiniRes, 10, 2).unwrap();
        let img = Tensor::new(&[3, 16, 16], (0..768).map(|i| (i % 97) as f32 / 97.0).collect()).unwrap();
        let cfg = AttackConfig {
            di: Some(DiConfig {
                prob: 0.7,
                low: 13,
                high: 16,
            }),
            checkpoints: vec![2, 5],
            ..short_cfg(5)
        };
        let a = attack(&[&m], &img, 3, 1, &cfg).unwrap();
        let b = attack(&[&m], &img, 3, 1, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trajectory.len(), 5);
        assert_eq!(a.checkpoints.len(), 2);
        for (_, x) in &a.checkpoints {
            for (v, o) in x.data().iter().zip(img.data()) {
                assert!((v - o).abs() <= cfg.epsilon + 1e-7 && (0.0..=1.0).contains(v));
            }
        }
        let two = AttackConfig {
            iterations: 2,
            checkpoints: vec![],
            ..cfg.clone()
        };
        let short = attack(&[&m], &img, 3, 1, &two).unwrap();
        assert_eq!(short.final_image, *a.checkpoint(2).unwrap());
    }

    #[test]
    fn one_step_plain_attack_is_fgsm() {
        let m = build_model(Arch::MiniVgg, 10, 5).unwrap();
        let img = Tensor::full(&[3, 16, 16], 0.5);
        let cfg = AttackConfig {
            alpha: 16.0 / 255.0,
            iterations: 1,
            checkpoints: vec![],
            ..AttackConfig::plain(LossSpec::new(LossKind::Ce))
        };
        let res = attack(&[&m], &img, 4, 0, &cfg).unwrap();
        let (grad, _) = gradient(&[&m], &img, 4, 0, &cfg, None).unwrap();
        for ((v, o), g) in res.final_image.data().iter().zip(img.data()).zip(grad.data()) {
            let expect = (o - cfg.epsilon * sign(*g)).clamp(0.0, 1.0);
            assert!(approx(*v, expect));
        }
    }
}
