#![no_main]

use libfuzzer_sys::fuzz_target;
use transfer_lab::models::{decode_weights, encode_weights};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_weights(data) {
        let again = decode_weights(&encode_weights(&model)).expect("re-encoded weights decode");
        assert_eq!(again.param_count(), model.param_count());
    }
});
