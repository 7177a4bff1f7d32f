use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use transfer_lab::data::{write_cifar10, Split};
use transfer_lab::eval::REPORT_HEADER;
use transfer_lab::models::Arch;
use transfer_lab_cli::artifacts::load_tensor;
use transfer_lab_cli::config::RunConfig;
use transfer_lab_oracle::fixtures::synthetic_cifar;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    models: PathBuf,
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_transfer-lab"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic data plus one briefly trained model per architecture.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("cifar");
        let models = root.join("models");
        write_cifar10(
            &data,
            &synthetic_cifar(500, 1, Split::Train),
            &synthetic_cifar(100, 2, Split::Test),
        )
        .unwrap();
        for arch in Arch::ALL {
            ok(&[
                "train",
                "--arch",
                arch.as_str(),
                "--data",
                p(&data),
                "--out",
                p(&models),
                "--seed",
                "0",
                "--epochs",
                "3",
                "--batch-size",
                "20",
                "--learning-rate",
                "0.01",
            ]);
        }
        Fixture {
            _dir: dir,
            root,
            data,
            models,
        }
    })
}

fn attack_args<'a>(f: &'a Fixture, out: &'a Path) -> Vec<&'a str> {
    vec![
        "attack",
        "--data",
        p(&f.data),
        "--models",
        p(&f.models),
        "--out",
        p(out),
        "--source",
        "mini_res",
        "--targets",
        "mini_vgg,mini_incep",
        "--loss",
        "logit",
        "--mi",
        "--ti",
        "--di",
        "--iters",
        "20",
        "--eps",
        "16",
        "--alpha",
        "2",
        "--seed",
        "7",
        "--n-images",
        "4",
        "--set",
        "checkpoints=5,10,20",
    ]
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn training_writes_weights_metrics_and_is_reproducible() {
    let f = fixture();
    let out = f.root.join("retrain");
    let args = [
        "train",
        "--arch",
        "mini_vgg",
        "--data",
        p(&f.data),
        "--out",
        p(&out),
        "--seed",
        "1",
        "--epochs",
        "1",
        "--set",
        "train_limit=100",
    ];
    let first = ok(&args);
    let line = String::from_utf8(first.stdout).unwrap();
    assert!(line.starts_with("mini_vgg,1,1,"), "{line}");
    let bytes = fs::read(out.join("mini_vgg_s1.mzw")).unwrap();
    let metrics = fs::read_to_string(out.join("mini_vgg_s1.metrics.csv")).unwrap();
    assert!(metrics.starts_with("arch,seed,epochs,test_acc\nmini_vgg,1,1,"));
    ok(&args);
    assert_eq!(fs::read(out.join("mini_vgg_s1.mzw")).unwrap(), bytes);
}

#[test]
fn trained_fixture_models_learn() {
    let f = fixture();
    for arch in Arch::ALL {
        let text = fs::read_to_string(f.models.join(format!("{arch}_s0.metrics.csv"))).unwrap();
        let acc: f64 = text
            .lines()
            .nth(1)
            .unwrap()
            .rsplit(',')
            .next()
            .unwrap()
            .parse()
            .unwrap();
        assert!(acc >= 0.8, "{arch}: {acc}");
    }
}

#[test]
fn unknown_arch_lists_valid_ones() {
    let out = run(&["train", "--arch", "resnet50"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for arch in Arch::ALL {
        assert!(err.contains(arch.as_str()), "{err}");
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, "iters = 10\nepsilon = 16\n").unwrap();
    let out = run(&["run", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown key 'epsilon'") && err.contains(":2"), "{err}");
    let out = run(&["suite", "single", "--set", "bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_models_are_refused_with_training_hints() {
    let f = fixture();
    let empty = f.root.join("no_models");
    let out = run(&[
        "suite",
        "single",
        "--data",
        p(&f.data),
        "--models",
        p(&empty),
        "--out",
        p(&f.root.join("x")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    for arch in Arch::ALL {
        assert!(err.contains(&format!("train --arch {arch} --seed 0")), "{err}");
    }
}

#[test]
fn attack_writes_report_trajectory_and_images() {
    let f = fixture();
    let out = f.root.join("attack");
    ok(&attack_args(f, &out));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().next(), Some(REPORT_HEADER));
    let rows = csv_rows(&out.join("report.csv"));
    assert_eq!(rows.len(), 2 * 3);
    for r in &rows {
        assert_eq!(r[0], "mini_res");
        assert_eq!(r[3], "MI+TI+DI");
        assert_eq!(r[5], "16.000");
        assert_eq!(r[6], "2.000");
    }
    let traj = csv_rows(&out.join("trajectory.csv"));
    assert_eq!(traj.len(), 4 * 20);
    let adv = load_tensor(&out.join("adv_logit_it20.tns")).unwrap();
    assert_eq!(adv.shape(), &[4, 3, 32, 32]);
    assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let cfg = RunConfig::load(&out.join("config.txt")).unwrap();
    assert_eq!(cfg.eps, 16.0);
    assert_eq!(cfg.seed, 7);
}

#[test]
fn loss_parameters_are_echoed_into_the_resolved_config() {
    let f = fixture();
    let out = f.root.join("potrip");
    ok(&[
        "attack",
        "--data",
        p(&f.data),
        "--models",
        p(&f.models),
        "--out",
        p(&out),
        "--source",
        "mini_vgg",
        "--targets",
        "mini_dense",
        "--loss",
        "po_trip",
        "--lambda",
        "0.02",
        "--gamma",
        "0.005",
        "--iters",
        "2",
        "--n-images",
        "2",
        "--set",
        "checkpoints=2",
    ]);
    let text = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(text.contains("loss = po_trip\n"), "{text}");
    assert!(text.contains("lambda = 0.02\n"), "{text}");
    assert!(text.contains("gamma = 0.005\n"), "{text}");
}

#[test]
fn zero_budget_gives_no_targeted_success() {
    let f = fixture();
    let out = f.root.join("eps0");
    ok(&[
        "attack",
        "--data",
        p(&f.data),
        "--models",
        p(&f.models),
        "--out",
        p(&out),
        "--source",
        "mini_res",
        "--targets",
        "mini_res",
        "--loss",
        "logit",
        "--eps",
        "0",
        "--iters",
        "10",
        "--n-images",
        "10",
        "--set",
        "checkpoints=10",
    ]);
    for r in csv_rows(&out.join("report.csv")) {
        assert_eq!(r[9], "0.000000", "{r:?}");
    }
}

#[test]
fn suite_reruns_from_resolved_config_are_byte_identical_across_job_counts() {
    let f = fixture();
    let common = |suite: &str, out: &Path| {
        ok(&[
            "suite",
            suite,
            "--data",
            p(&f.data),
            "--models",
            p(&f.models),
            "--out",
            p(out),
            "--iters",
            "4",
            "--n-images",
            "3",
            "--set",
            "checkpoints=2,4",
            "--set",
            "min_accuracy=0",
            "--set",
            "uap_images=20",
        ]);
    };
    for (suite, csv) in [
        ("single", "single.csv"),
        ("uap", "uap.csv"),
        ("ranksweep", "ranksweep.csv"),
    ] {
        let first = f.root.join(format!("det_{suite}_1"));
        common(suite, &first);
        let second = f.root.join(format!("det_{suite}_4"));
        ok(&[
            "run",
            "--config",
            p(&first.join("config.txt")),
            "--out",
            p(&second),
            "--jobs",
            "4",
        ]);
        let a = fs::read(first.join(csv)).unwrap();
        assert!(a.len() > REPORT_HEADER.len() + 1, "{suite}: empty report");
        assert_eq!(a, fs::read(second.join(csv)).unwrap(), "{suite}");
    }
}
