#![no_main]

use libfuzzer_sys::fuzz_target;
use transfer_lab_cli::artifacts::{decode_tensor, encode_tensor};

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_tensor(data) {
        assert_eq!(encode_tensor(&t), data);
    }
});
