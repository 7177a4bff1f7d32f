//! Independent f64 reference computations used by the test suites.
//!
//! [`ops`] re-implements every primitive with naive loops, [`forward`] walks
//! an architecture template with them, [`losses`] evaluates the attack
//! objectives, and [`check`] compares the engine's analytic gradients
//! against central finite differences of these references.

pub mod check;
pub mod fixtures;
pub mod losses;
pub mod ops;
pub mod suites;

use transfer_lab::models::{Layer, Model};

pub use ops::{Array, Pattern};

/// Logits of `model` on one `[C, H, W]` image, computed in f64, together
/// with the activation pattern of its ReLU and max-pool layers.
pub fn forward(model: &Model, image: &Array) -> (Vec<f64>, Pattern) {
    let params = model.params();
    let get = |name: &str| {
        let t = &params[name];
        Array::from_f32(t.shape(), t.data())
    };
    let (mean, std) = model.normalization();
    let mean: Vec<f64> = mean.iter().map(|&v| v as f64).collect();
    let std: Vec<f64> = std.iter().map(|&v| v as f64).collect();

    let mut pattern = Pattern::new();
    let mut values: Vec<Array> = Vec::with_capacity(model.template().layers.len());
    for layer in &model.template().layers {
        let v = match layer {
            Layer::Input => image.clone(),
            Layer::Normalize { src } => ops::normalize(&values[*src], &mean, &std),
            Layer::Conv {
                src,
                weight,
                bias,
                stride,
                padding,
            } => {
                let b = get(bias);
                ops::conv2d(&values[*src], &get(weight), Some(&b.data), *stride, *padding)
            }
            Layer::Relu { src } => ops::relu(&values[*src], &mut pattern),
            Layer::Pool {
                src,
                kind,
                window,
                stride,
            } => ops::pool(&values[*src], *kind, *window, *stride, &mut pattern),
            Layer::GlobalAvgPool { src } => {
                let x = &values[*src];
                let (c, plane) = (x.shape[0], x.shape[1] * x.shape[2]);
                let data = x
                    .data
                    .chunks(plane)
                    .map(|p| p.iter().sum::<f64>() / plane as f64)
                    .collect();
                Array::new(&[c, 1, 1], data)
            }
            Layer::Add { a, b } => ops::add(&values[*a], &values[*b]),
            Layer::Concat { a, b } => ops::concat_channels(&values[*a], &values[*b]),
            Layer::Flatten { src } => {
                let x = &values[*src];
                Array::new(&[x.data.len()], x.data.clone())
            }
            Layer::Dense { src, weight, bias } => {
                let b = get(bias);
                let y = ops::dense(&values[*src].data, &get(weight), Some(&b.data));
                Array::new(&[y.len()], y)
            }
        };
        values.push(v);
    }
    (values.pop().expect("non-empty template").data, pattern)
}
