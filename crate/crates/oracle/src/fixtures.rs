//! Small synthetic stand-ins for CIFAR-10 that models learn within an epoch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transfer_lab::data::{Dataset, Split};

/// `n` 3x32x32 images over 10 classes. Each class has its own colour and
/// stripe orientation; pixels carry uniform noise on top.
pub fn synthetic_cifar(n: usize, seed: u64, split: Split) -> Dataset {
    const SIDE: usize = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * 3 * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        labels.push(class as u8);
        for c in 0..3 {
            let tint = 60.0 + 40.0 * ((class + c * 3) % 5) as f32;
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let stripe = if class < 5 { y } else { x };
                    let on = (stripe / (2 + class % 5)) % 2 == 0;
                    let base = if on { tint } else { 255.0 - tint };
                    let v = base + rng.random_range(-30.0f32..30.0);
                    pixels.push(v.clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    Dataset::from_bytes(pixels, labels, [3, SIDE, SIDE], 10, split).expect("consistent synthetic data")
}
