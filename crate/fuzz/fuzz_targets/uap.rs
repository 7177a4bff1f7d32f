#![no_main]

use libfuzzer_sys::fuzz_target;
use transfer_lab::uap::{decode_uap, encode_uap};

fuzz_target!(|data: &[u8]| {
    if let Ok(uap) = decode_uap(data) {
        assert_eq!(encode_uap(&uap), data);
    }
});
