#![no_main]

use libfuzzer_sys::fuzz_target;
use transfer_lab::data::{parse_cifar10_batch, CIFAR10_RECORD};

fuzz_target!(|data: &[u8]| {
    if let Ok((pixels, labels)) = parse_cifar10_batch(data, "fuzz") {
        assert_eq!(labels.len() * CIFAR10_RECORD, data.len());
        assert_eq!(pixels.len(), labels.len() * (CIFAR10_RECORD - 1));
        assert!(labels.iter().all(|&l| l < 10));
    }
});
