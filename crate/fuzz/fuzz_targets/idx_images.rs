#![no_main]

use libfuzzer_sys::fuzz_target;
use transfer_lab::data::parse_idx_images;

fuzz_target!(|data: &[u8]| {
    if let Ok((pixels, shape, count)) = parse_idx_images(data, "fuzz") {
        assert_eq!(pixels.len(), shape.iter().product::<usize>() * count);
    }
});
