#![no_main]

use libfuzzer_sys::fuzz_target;
use transfer_lab::data::parse_idx_labels;

fuzz_target!(|data: &[u8]| {
    if let Ok(labels) = parse_idx_labels(data, "fuzz") {
        assert_eq!(labels.len() + 8, data.len());
    }
});
