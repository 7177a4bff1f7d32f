//! Data-free verification suites shared by the integration tests and the
//! acceptance harness. Each returns measurements; callers decide tolerances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transfer_lab::attack::{attack, AttackConfig, DiConfig, Init, Norm};
use transfer_lab::losses::{LossKind, LossSpec, Reduction};
use transfer_lab::models::{Arch, Model};
use transfer_lab::tensor::{Graph, Tensor};

use crate::check::{check_architecture, check_primitives, GradCheck};
use crate::ops::softmax;

/// Worst deviations of the engine's loss gradients from their closed forms.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    pub cases: usize,
    /// Max `|grad - (softmax - onehot)|` for cross-entropy.
    pub ce_max_err: f64,
    /// Number of logit-loss gradients that differ from `-onehot` at all.
    pub logit_mismatches: usize,
}

/// Back-propagate both losses from `cases` random logit vectors and compare
/// the logit gradients with `softmax - onehot` and `-onehot`.
pub fn gradient_identities(cases: usize, seed: u64) -> IdentityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = IdentityReport {
        cases,
        ce_max_err: 0.0,
        logit_mismatches: 0,
    };
    for _ in 0..cases {
        let k = rng.random_range(2..=20);
        let scale = rng.random_range(0.1f32..20.0);
        let z: Vec<f32> = (0..k).map(|_| rng.random_range(-scale..scale)).collect();
        let target = rng.random_range(0..k);

        let grad = |kind: LossKind| {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::from_vec(z.clone()), true);
            let loss = LossSpec::new(kind)
                .apply(&mut g, x, &[target], &[], Reduction::Sum)
                .expect("loss head");
            g.backward(loss.node).expect("scalar").take(x).expect("logit gradient")
        };

        let p = softmax(&z.iter().map(|&v| v as f64).collect::<Vec<_>>());
        for (j, &g) in grad(LossKind::Ce).iter().enumerate() {
            let expected = p[j] - if j == target { 1.0 } else { 0.0 };
            report.ce_max_err = report.ce_max_err.max((g as f64 - expected).abs());
        }
        let logit = grad(LossKind::Logit);
        let exact = logit
            .iter()
            .enumerate()
            .all(|(j, &g)| g == if j == target { -1.0 } else { 0.0 });
        if !exact {
            report.logit_mismatches += 1;
        }
    }
    report
}

/// Every primitive check for each seed, followed by one full-model check
/// per architecture on a 32x32 input.
pub fn autodiff(seeds: std::ops::Range<u64>, coords: usize) -> Vec<GradCheck> {
    let mut out = Vec::new();
    for seed in seeds {
        out.extend(check_primitives(seed));
        for arch in Arch::ALL {
            out.push(check_architecture(arch, seed, 32, coords));
        }
    }
    out
}

/// Largest observed constraint violations over all attack iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintReport {
    pub iterations: usize,
    /// Max of `dist(x', x) - epsilon` under the run's norm, clamped at 0.
    pub ball_excess: f64,
    /// Max distance of any pixel outside `[0, 1]`.
    pub range_excess: f64,
}

/// Random bounded attacks in `norm` totalling `iterations` steps, measuring
/// every intermediate image.
pub fn constraints(norm: Norm, iterations: usize, seed: u64) -> ConstraintReport {
    const SIZE: usize = 16;
    const RUN: usize = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ConstraintReport {
        iterations: 0,
        ball_excess: 0.0,
        range_excess: 0.0,
    };
    let mut run = 0u64;
    while report.iterations < iterations {
        let steps = RUN.min(iterations - report.iterations);
        let arch = Arch::ALL[rng.random_range(0..Arch::ALL.len())];
        let model = Model::new(arch, 3, 10, seed.wrapping_add(run)).expect("model");
        let pixels: Vec<f32> = (0..3 * SIZE * SIZE)
            .map(|_| match rng.random_range(0..4) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random_range(0.0..=1.0),
            })
            .collect();
        let image = Tensor::new(&[3, SIZE, SIZE], pixels).expect("image");
        let kind = LossKind::ALL[rng.random_range(0..LossKind::ALL.len())];
        let target = rng.random_range(0..10);
        let original = (target + rng.random_range(1..10)) % 10;

        let mut cfg = AttackConfig::new(LossSpec::new(kind));
        cfg.norm = norm;
        cfg.epsilon = match norm {
            Norm::Linf => rng.random_range(1..=32) as f32 / 255.0,
            Norm::L2 => rng.random_range(0.1f32..3.0),
        };
        cfg.alpha = match norm {
            Norm::Linf => rng.random_range(1..=8) as f32 / 255.0,
            Norm::L2 => rng.random_range(0.05f32..1.0),
        };
        cfg.iterations = steps;
        cfg.checkpoints = (1..=steps).collect();
        cfg.momentum = rng.random_bool(0.5).then(|| rng.random_range(0.0f32..=1.0));
        cfg.ti_kernel = rng.random_bool(0.5).then_some([1, 3, 5][rng.random_range(0..3)]);
        cfg.di = rng.random_bool(0.5).then_some(DiConfig {
            prob: 0.7,
            low: SIZE - 3,
            high: SIZE,
        });
        cfg.init = if rng.random_bool(0.5) {
            Init::Gaussian { sigma: 0.1 }
        } else {
            Init::Zero
        };
        cfg.seed = rng.random();

        let result = attack(&[&model], &image, target, original, &cfg).expect("attack");
        for (_, x) in &result.checkpoints {
            let dist = match norm {
                Norm::Linf => x
                    .data()
                    .iter()
                    .zip(image.data())
                    .map(|(&a, &b)| (a as f64 - b as f64).abs())
                    .fold(0.0, f64::max),
                Norm::L2 => x
                    .data()
                    .iter()
                    .zip(image.data())
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            };
            report.ball_excess = report.ball_excess.max(dist - cfg.epsilon as f64);
            for &v in x.data() {
                let out = (-(v as f64)).max(v as f64 - 1.0);
                if out > report.range_excess {
                    report.range_excess = out;
                }
            }
        }
        report.iterations += result.checkpoints.len();
        run += 1;
    }
    report
}

/// Outcome of one configuration-equivalence check.
#[derive(Debug, Clone, PartialEq)]
pub struct Equivalence {
    pub name: &'static str,
    pub identical: bool,
}

/// Bitwise comparisons of configurations that must coincide: zero momentum
/// decay, a 1x1 smoothing window and a never-firing resize, each against the
/// method switched off, and an intermediate snapshot against a shorter run.
pub fn equivalences(seed: u64) -> Vec<Equivalence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(Arch::MiniIncep, 3, 10, seed).expect("model");
    let image = Tensor::new(
        &[3, 32, 32],
        (0..3 * 32 * 32).map(|_| rng.random_range(0.0..=1.0)).collect(),
    )
    .expect("image");
    let (target, original) = (3, 7);
    let run = |cfg: &AttackConfig| attack(&[&model], &image, target, original, cfg).expect("attack");
    let base = AttackConfig {
        iterations: 30,
        checkpoints: vec![],
        seed,
        ..AttackConfig::new(LossSpec::new(LossKind::Logit))
    };

    let mut out = Vec::new();
    let same = |a: &AttackConfig, b: &AttackConfig| run(a).final_image == run(b).final_image;

    let with = AttackConfig {
        momentum: Some(0.0),
        ..base.clone()
    };
    let without = AttackConfig {
        momentum: None,
        ..base.clone()
    };
    out.push(Equivalence {
        name: "momentum decay 0 equals momentum off",
        identical: same(&with, &without),
    });

    let with = AttackConfig {
        ti_kernel: Some(1),
        ..base.clone()
    };
    let without = AttackConfig {
        ti_kernel: None,
        ..base.clone()
    };
    out.push(Equivalence {
        name: "1x1 smoothing equals smoothing off",
        identical: same(&with, &without),
    });

    let with = AttackConfig {
        di: Some(DiConfig {
            prob: 0.0,
            ..DiConfig::default()
        }),
        ..base.clone()
    };
    let without = AttackConfig {
        di: None,
        ..base.clone()
    };
    out.push(Equivalence {
        name: "resize probability 0 equals resize off",
        identical: same(&with, &without),
    });

    let long = AttackConfig {
        iterations: 300,
        checkpoints: vec![100, 300],
        ..base.clone()
    };
    let short = AttackConfig {
        iterations: 100,
        checkpoints: vec![],
        ..base.clone()
    };
    let snapshot = run(&long).checkpoint(100).cloned();
    out.push(Equivalence {
        name: "checkpoint 100 of 300 equals a 100-iteration run",
        identical: snapshot.as_ref() == Some(&run(&short).final_image),
    });
    out
}
