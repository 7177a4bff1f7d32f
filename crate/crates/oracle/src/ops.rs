//! Straightforward f64 loops for every primitive, written for clarity rather
//! than speed. Images are single `[C, H, W]` arrays.
//!
//! Piecewise ops record their branch decisions in a [`Pattern`] so callers
//! can tell when a perturbation crossed a kink.

use transfer_lab::tensor::PoolKind;

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        Self::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    fn chw(&self) -> (usize, usize, usize) {
        match self.shape.as_slice() {
            [c, h, w] => (*c, *h, *w),
            s => panic!("expected [C,H,W], got {s:?}"),
        }
    }
}

/// Branch decisions of piecewise-linear ops, in evaluation order.
pub type Pattern = Vec<u32>;

pub fn conv2d(x: &Array, k: &Array, bias: Option<&[f64]>, stride: usize, pad: usize) -> Array {
    let (c, h, w) = x.chw();
    let [co, ci, kh, kw] = k.shape[..] else {
        panic!("kernel shape {:?}", k.shape)
    };
    assert_eq!(ci, c);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; c * ph * pw];
    for i in 0..c {
        for y in 0..h {
            let dst = (i * ph + y + pad) * pw + pad;
            padded[dst..dst + w].copy_from_slice(&x.data[(i * h + y) * w..(i * h + y + 1) * w]);
        }
    }
    let oh = (ph - kh) / stride + 1;
    let ow = (pw - kw) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for (o, plane) in out.chunks_mut(oh * ow).enumerate() {
        plane.fill(bias.map_or(0.0, |b| b[o]));
        for i in 0..c {
            for dy in 0..kh {
                for dx in 0..kw {
                    let tap = k.data[((o * c + i) * kh + dy) * kw + dx];
                    for y in 0..oh {
                        let src = (i * ph + y * stride + dy) * pw + dx;
                        let dst = &mut plane[y * ow..(y + 1) * ow];
                        if stride == 1 {
                            for (d, s) in dst.iter_mut().zip(&padded[src..src + ow]) {
                                *d += tap * s;
                            }
                        } else {
                            for (xo, d) in dst.iter_mut().enumerate() {
                                *d += tap * padded[src + xo * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    Array::new(&[co, oh, ow], out)
}

pub fn dense(x: &[f64], weight: &Array, bias: Option<&[f64]>) -> Vec<f64> {
    let [out, inp] = weight.shape[..] else {
        panic!("weight shape {:?}", weight.shape)
    };
    assert_eq!(inp, x.len());
    (0..out)
        .map(|o| {
            let dot: f64 = (0..inp).map(|i| weight.data[o * inp + i] * x[i]).sum();
            dot + bias.map_or(0.0, |b| b[o])
        })
        .collect()
}

pub fn relu(x: &Array, pattern: &mut Pattern) -> Array {
    pattern.extend(x.data.iter().map(|&v| (v > 0.0) as u32));
    Array::new(&x.shape, x.data.iter().map(|&v| v.max(0.0)).collect())
}

pub fn pool(x: &Array, kind: PoolKind, window: usize, stride: usize, pattern: &mut Pattern) -> Array {
    let (c, h, w) = x.chw();
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0u32;
                let mut sum = 0.0;
                for dy in 0..window {
                    for dx in 0..window {
                        let v = x.data[(ch * h + y * stride + dy) * w + xo * stride + dx];
                        sum += v;
                        if v > best {
                            best = v;
                            best_at = (dy * window + dx) as u32;
                        }
                    }
                }
                match kind {
                    PoolKind::Max => {
                        pattern.push(best_at);
                        out.push(best);
                    }
                    PoolKind::Avg => out.push(sum / (window * window) as f64),
                }
            }
        }
    }
    Array::new(&[c, oh, ow], out)
}

pub fn add(a: &Array, b: &Array) -> Array {
    assert_eq!(a.shape, b.shape);
    Array::new(&a.shape, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

pub fn concat_channels(a: &Array, b: &Array) -> Array {
    let (ca, h, w) = a.chw();
    let (cb, hb, wb) = b.chw();
    assert_eq!((h, w), (hb, wb));
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Array::new(&[ca + cb, h, w], data)
}

pub fn normalize(x: &Array, mean: &[f64], std: &[f64]) -> Array {
    let (c, h, w) = x.chw();
    let mut data = x.data.clone();
    for ch in 0..c {
        for v in &mut data[ch * h * w..(ch + 1) * h * w] {
            *v = (*v - mean[ch]) / std[ch];
        }
    }
    Array::new(&x.shape, data)
}

/// Bilinear source position of output pixel `i` when shrinking `src` to
/// `dst`, half-pixel aligned and clamped to the edge.
fn source_taps(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let scale = src as f32 / dst as f32;
    let pos = ((i as f32 + 0.5) * scale - 0.5).max(0.0);
    let lo = (pos.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, (pos - lo as f32) as f64)
}

pub fn resize_pad(x: &Array, size: usize, top: usize, left: usize) -> Array {
    let (c, h, w) = x.chw();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let at = |y: usize, xx: usize| x.data[(ch * h + y) * w + xx];
        for oy in 0..size {
            let (y0, y1, fy) = source_taps(oy, h, size);
            for ox in 0..size {
                let (x0, x1, fx) = source_taps(ox, w, size);
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                out[(ch * h + oy + top) * w + ox + left] = v;
            }
        }
    }
    Array::new(&x.shape, out)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let x = Array::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let k = Array::new(&[1, 1, 3, 3], vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(conv2d(&x, &k, None, 1, 1), x);
    }

    #[test]
    fn pool_records_winner() {
        let x = Array::new(&[1, 2, 2], vec![1.0, 5.0, 3.0, 4.0]);
        let mut p = Pattern::new();
        let y = pool(&x, PoolKind::Max, 2, 2, &mut p);
        assert_eq!(y.data, vec![5.0]);
        assert_eq!(p, vec![1]);
        let y = pool(&x, PoolKind::Avg, 2, 2, &mut p);
        assert_eq!(y.data, vec![3.25]);
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let x = Array::new(&[1, 3, 3], (0..9).map(f64::from).collect());
        assert_eq!(resize_pad(&x, 3, 0, 0), x);
    }
}
