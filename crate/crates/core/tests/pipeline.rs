//! End-to-end runs on synthetic data: train, attack, score.

use std::sync::OnceLock;

use transfer_lab::attack::AttackConfig;
use transfer_lab::data::{Dataset, Split};
use transfer_lab::eval::{
    mean_targeted, run_ensemble_transfer, run_rank_sweep, run_single_transfer, run_stepsize_sweep, run_trend_analysis,
    EvalConfig, Holdout, ModelEntry,
};
use transfer_lab::losses::{LossKind, LossSpec};
use transfer_lab::models::{accuracy, train, Arch, Model, TrainConfig};
use transfer_lab::uap::{generate_uap, run_uap_suite, score_uap, UapArtifact};
use transfer_lab::{Error, Tensor};
use transfer_lab_oracle::fixtures::synthetic_cifar;

struct Lab {
    test: Dataset,
    models: Vec<ModelEntry>,
}

fn lab() -> &'static Lab {
    static LAB: OnceLock<Lab> = OnceLock::new();
    LAB.get_or_init(|| {
        let train_set = synthetic_cifar(500, 1, Split::Train);
        let test = synthetic_cifar(100, 2, Split::Test);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 20,
            learning_rate: 0.01,
            decay_epochs: vec![],
            flip: false,
            ..TrainConfig::default()
        };
        let models = Arch::ALL
            .iter()
            .map(|&arch| {
                let model = Model::new(arch, 3, 10, 0).unwrap();
                let (model, _) = train(model, &train_set, &test, &cfg).unwrap();
                let acc = accuracy(&model, &test, 100).unwrap();
                ModelEntry::new(arch.as_str(), model).with_accuracy(acc)
            })
            .collect();
        Lab { test, models }
    })
}

fn quick(n_images: usize) -> EvalConfig {
    EvalConfig {
        attack: AttackConfig {
            iterations: 10,
            checkpoints: vec![5, 10],
            ..AttackConfig::default()
        },
        n_images,
        min_accuracy: 0.5,
        ..EvalConfig::default()
    }
}

fn refs(lab: &Lab) -> Vec<&ModelEntry> {
    lab.models.iter().collect()
}

#[test]
fn single_transfer_covers_every_ordered_pair() {
    let lab = lab();
    let report = run_single_transfer(&refs(lab), &lab.test, &quick(6)).unwrap();
    assert_eq!(report.rows.len(), 12 * 2 * 2);
    for r in &report.rows {
        assert_ne!(r.source, r.target);
        assert!((0.0..=1.0).contains(&r.targeted_sr));
        assert!(r.targeted_sr <= r.nontargeted_sr, "{r:?}");
        assert!((1.0..=10.0).contains(&r.mean_target_rank));
        assert_eq!(r.n_images, 6);
    }
}

#[test]
fn white_box_cells_are_added_on_request() {
    let lab = lab();
    let cfg = EvalConfig {
        white_box: true,
        losses: vec![LossSpec::new(LossKind::Logit)],
        ..quick(4)
    };
    let report = run_single_transfer(&refs(lab), &lab.test, &cfg).unwrap();
    assert_eq!(report.rows.iter().filter(|r| r.source == r.target).count(), 4 * 2);
    let white = mean_targeted(&report, |r| r.source == r.target && r.checkpoint == 10).unwrap();
    let black = mean_targeted(&report, |r| r.source != r.target && r.checkpoint == 10).unwrap();
    assert!(white >= black, "{white} < {black}");
}

#[test]
fn hard_ensembles_never_include_the_holdout() {
    let lab = lab();
    let cfg = EvalConfig {
        losses: vec![LossSpec::new(LossKind::Logit)],
        ..quick(3)
    };
    let report = run_ensemble_transfer(&refs(lab), &[], Holdout::Hard, &lab.test, &cfg).unwrap();
    let mut holdouts: Vec<&str> = report.rows.iter().map(|r| r.target.as_str()).collect();
    holdouts.dedup();
    assert_eq!(holdouts.len(), 4);
    for r in &report.rows {
        let members: Vec<&str> = r.source.split('+').collect();
        assert_eq!(members.len(), 3, "{}", r.source);
        assert!(!members.contains(&r.target.as_str()));
    }
}

#[test]
fn rank_sweep_rejects_the_top_class() {
    let lab = lab();
    let (s, t) = (&lab.models[0], &lab.models[1]);
    let report = run_rank_sweep(s, t, &[2, 10], &lab.test, &quick(3)).unwrap();
    assert!(!report.rows.is_empty());
    assert!(matches!(
        run_rank_sweep(s, t, &[1], &lab.test, &quick(3)),
        Err(Error::Usage(_))
    ));
    assert!(run_rank_sweep(s, t, &[11], &lab.test, &quick(3)).is_err());
}

#[test]
fn duplicate_step_sizes_collapse() {
    let lab = lab();
    let (s, t) = (&lab.models[0], &lab.models[1]);
    let cfg = EvalConfig {
        losses: vec![LossSpec::new(LossKind::Ce)],
        ..quick(2)
    };
    let alpha = 2.0 / 255.0;
    let report = run_stepsize_sweep(s, t, &[alpha, alpha, 1.0 / 255.0], &lab.test, &cfg).unwrap();
    assert_eq!(report.rows.len(), 2);
}

#[test]
fn trends_start_at_one() {
    let lab = lab();
    let cfg = EvalConfig {
        losses: [LossKind::Ce, LossKind::Logit].map(LossSpec::new).to_vec(),
        ..quick(3)
    };
    let report = run_trend_analysis(&lab.models[0], &lab.test, &cfg).unwrap();
    for kind in [LossKind::Ce, LossKind::Logit] {
        let series = report.series(kind);
        assert_eq!(series.len(), 10);
        assert_eq!(series[0].norm_loss, 1.0);
        assert_eq!(series[0].norm_grad_l1, 1.0);
    }
}

#[test]
fn universal_perturbations_never_read_data() {
    let lab = lab();
    let before = lab.test.reads();
    let model = &lab.models[0].model;
    let cfg = AttackConfig {
        iterations: 5,
        checkpoints: vec![],
        ..AttackConfig::default()
    };
    let uap = generate_uap(&[model], "m", lab.test.image_shape(), 3, &cfg).unwrap();
    assert_eq!(lab.test.reads(), before);
    assert!(uap.perturbation.linf_norm() <= cfg.epsilon);
}

#[test]
fn zero_perturbation_success_averages_to_one_over_k() {
    let lab = lab();
    let model = &lab.models[1].model;
    let total: f64 = (0..10)
        .map(|target| {
            let uap = UapArtifact {
                perturbation: Tensor::zeros(&[3, 32, 32]),
                target,
                epsilon: 0.0,
                source: "none".into(),
            };
            score_uap(&uap, model, &lab.test).unwrap().targeted
        })
        .sum();
    assert!((total / 10.0 - 0.1).abs() < 1e-12, "{total}");
}

#[test]
fn uap_suite_reports_each_model_and_loss() {
    let lab = lab();
    let cfg = EvalConfig {
        attack: AttackConfig {
            iterations: 3,
            checkpoints: vec![],
            ..AttackConfig::default()
        },
        n_images: 20,
        min_accuracy: 0.5,
        ..EvalConfig::default()
    };
    let report = run_uap_suite(&refs(lab), &lab.test, &cfg).unwrap();
    assert_eq!(report.rows.len(), 4 * 2);
    for r in &report.rows {
        assert_eq!(r.source, r.target);
        assert_eq!(r.n_images, 20);
    }
}

#[test]
fn untrained_models_are_refused() {
    let lab = lab();
    let raw = ModelEntry::new("raw", Model::new(Arch::MiniVgg, 3, 10, 9).unwrap());
    let cfg = EvalConfig {
        min_accuracy: 0.6,
        ..quick(2)
    };
    let err = run_single_transfer(&[&raw, &lab.models[0]], &lab.test, &cfg).unwrap_err();
    assert!(matches!(err, Error::Refused(_)), "{err}");
}
