//! Replays the checked-in fuzz seed corpora on stable.

use std::fs;
use std::path::PathBuf;

use transfer_lab::data::{parse_cifar10_batch, parse_idx_images, parse_idx_labels, CIFAR10_RECORD};
use transfer_lab::models::{decode_weights, encode_weights};
use transfer_lab::uap::{decode_uap, encode_uap};
use transfer_lab_cli::artifacts::{decode_tensor, encode_tensor};
use transfer_lab_cli::config::RunConfig;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            (
                path.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&path).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus {target}");
    out
}

/// Each corpus holds at least one accepted and one rejected input.
fn check(target: &str, accept: impl Fn(&[u8]) -> bool) {
    let outcomes: Vec<(String, bool)> = seeds(target).into_iter().map(|(n, b)| (n, accept(&b))).collect();
    assert!(outcomes.iter().any(|o| o.1), "{target}: nothing accepted {outcomes:?}");
    assert!(outcomes.iter().any(|o| !o.1), "{target}: nothing rejected {outcomes:?}");
}

#[test]
fn cifar_batches() {
    check("cifar_batch", |data| match parse_cifar10_batch(data, "corpus") {
        Ok((pixels, labels)) => {
            assert_eq!(labels.len() * CIFAR10_RECORD, data.len());
            assert_eq!(pixels.len(), labels.len() * (CIFAR10_RECORD - 1));
            assert!(labels.iter().all(|&l| l < 10));
            true
        }
        Err(_) => false,
    });
}

#[test]
fn idx_images() {
    check("idx_images", |data| match parse_idx_images(data, "corpus") {
        Ok((pixels, shape, count)) => {
            assert_eq!(pixels.len(), shape.iter().product::<usize>() * count);
            count > 0
        }
        Err(_) => false,
    });
}

#[test]
fn idx_labels() {
    check("idx_labels", |data| match parse_idx_labels(data, "corpus") {
        Ok(labels) => {
            assert_eq!(labels.len() + 8, data.len());
            true
        }
        Err(_) => false,
    });
}

#[test]
fn weights() {
    check("weights", |data| match decode_weights(data) {
        Ok(model) => {
            let again = decode_weights(&encode_weights(&model)).unwrap();
            assert_eq!(again.param_count(), model.param_count());
            true
        }
        Err(_) => false,
    });
}

#[test]
fn uap_files() {
    check("uap", |data| match decode_uap(data) {
        Ok(uap) => {
            assert_eq!(encode_uap(&uap), data);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn tensor_files() {
    check("tensor_file", |data| match decode_tensor(data) {
        Ok(t) => {
            assert_eq!(encode_tensor(&t), data);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn run_configs() {
    check("run_config", |data| {
        let Ok(text) = std::str::from_utf8(data) else {
            return false;
        };
        match RunConfig::parse(text) {
            Ok(cfg) => {
                let resolved = cfg.to_text();
                assert_eq!(RunConfig::parse(&resolved).unwrap().to_text(), resolved);
                true
            }
            Err(_) => false,
        }
    });
}
