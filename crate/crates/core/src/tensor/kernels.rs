//! Single-image compute kernels over flat `[C, H, W]` slices.
//!
//! The graph maps these over the batch axis. They are also used directly where
//! no differentiation is needed (gradient smoothing in the attack loop).

/// Spatial geometry of a convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col(input: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * n..][..n];
                for oy in 0..oh {
                    let y = (oy * g.stride + i) as isize - g.padding as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if y < 0 || y >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let x = (ox * g.stride + j) as isize - g.padding as isize;
                        *d = if x < 0 || x >= g.w as isize {
                            0.0
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeometry, grad_input: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    for c in 0..g.c_in {
        let plane = &mut grad_input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * n..][..n];
                for oy in 0..oh {
                    let y = (oy * g.stride + i) as isize - g.padding as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for ox in 0..ow {
                        let x = (ox * g.stride + j) as isize - g.padding as isize;
                        if x >= 0 && x < g.w as isize {
                            dst[x as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a · b (+ c if accumulate)` for row-major operands, with optional
/// transposition expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every operand slice covers the strided extent implied by
    // (m, k, n) and its strides; callers size them from the same geometry.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation of one `[c_in, h, w]` image with `[c_out, c_in, kh, kw]`.
pub fn conv2d_forward(input: &[f32], kernel: &[f32], bias: Option<&[f32]>, g: &ConvGeometry, out: &mut [f32]) {
    let n = g.out_h() * g.out_w();
    let k = g.patch_len();
    if g.is_pointwise() {
        gemm(g.c_out, k, n, kernel, (k, 1), input, (n, 1), out, false);
    } else {
        let mut cols = vec![0.0f32; k * n];
        im2col(input, g, &mut cols);
        gemm(g.c_out, k, n, kernel, (k, 1), &cols, (n, 1), out, false);
    }
    if let Some(bias) = bias {
        for (row, &b) in out.chunks_mut(n).zip(bias) {
            row.iter_mut().for_each(|v| *v += b);
        }
    }
}

/// Backward pass of [`conv2d_forward`] for one image. Gradients are
/// accumulated into whichever of `grad_input` / `grad_kernel` / `grad_bias`
/// are requested.
pub fn conv2d_backward(
    input: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    g: &ConvGeometry,
    grad_input: Option<&mut [f32]>,
    grad_kernel: Option<&mut [f32]>,
    grad_bias: Option<&mut [f32]>,
) {
    let n = g.out_h() * g.out_w();
    let k = g.patch_len();
    if let Some(gb) = grad_bias {
        for (b, row) in gb.iter_mut().zip(grad_out.chunks(n)) {
            *b += row.iter().sum::<f32>();
        }
    }
    let pointwise = g.is_pointwise();
    if let Some(gk) = grad_kernel {
        if pointwise {
            gemm(g.c_out, n, k, grad_out, (n, 1), input, (1, n), gk, true);
        } else {
            let mut cols = vec![0.0f32; k * n];
            im2col(input, g, &mut cols);
            gemm(g.c_out, n, k, grad_out, (n, 1), &cols, (1, n), gk, true);
        }
    }
    if let Some(gi) = grad_input {
        if pointwise {
            gemm(k, g.c_out, n, kernel, (1, k), grad_out, (n, 1), gi, true);
        } else {
            let mut dcols = vec![0.0f32; k * n];
            gemm(k, g.c_out, n, kernel, (1, k), grad_out, (n, 1), &mut dcols, false);
            col2im(&dcols, g, gi);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Pooling geometry: no padding, output extent `(h - window) / stride + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn out_h(&self) -> usize {
        (self.h - self.window) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.window) / self.stride + 1
    }
}

/// Pools one image. For max pooling, `argmax` receives the flat input index
/// selected for each output (first maximum in row-major window order).
pub fn pool2d_forward(input: &[f32], kind: PoolKind, g: &PoolGeometry, out: &mut [f32], argmax: &mut [u32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let inv = 1.0 / (g.window * g.window) as f32;
    for c in 0..g.channels {
        let base = c * g.h * g.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (c * oh + oy) * ow + ox;
                match kind {
                    PoolKind::Max => {
                        let mut best_idx = base + oy * g.stride * g.w + ox * g.stride;
                        let mut best = input[best_idx];
                        for i in 0..g.window {
                            for j in 0..g.window {
                                let idx = base + (oy * g.stride + i) * g.w + ox * g.stride + j;
                                if input[idx] > best {
                                    best = input[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[o] = best;
                        argmax[o] = best_idx as u32;
                    }
                    PoolKind::Avg => {
                        let mut sum = 0.0f32;
                        for i in 0..g.window {
                            let row = base + (oy * g.stride + i) * g.w + ox * g.stride;
                            sum += input[row..row + g.window].iter().sum::<f32>();
                        }
                        out[o] = sum * inv;
                    }
                }
            }
        }
    }
}

pub fn pool2d_backward(kind: PoolKind, g: &PoolGeometry, grad_out: &[f32], argmax: &[u32], grad_input: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    match kind {
        PoolKind::Max => {
            for (o, &go) in grad_out.iter().enumerate() {
                grad_input[argmax[o] as usize] += go;
            }
        }
        PoolKind::Avg => {
            let inv = 1.0 / (g.window * g.window) as f32;
            for c in 0..g.channels {
                let base = c * g.h * g.w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let share = grad_out[(c * oh + oy) * ow + ox] * inv;
                        for i in 0..g.window {
                            let row = base + (oy * g.stride + i) * g.w + ox * g.stride;
                            grad_input[row..row + g.window].iter_mut().for_each(|v| *v += share);
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear resize to `size × size` (half-pixel centres, edge clamped) placed
/// at (`top`, `left`) inside a zero canvas of the original extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResizePad {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub size: usize,
    pub top: usize,
    pub left: usize,
}

struct Tap {
    lo: usize,
    hi: usize,
    frac: f32,
}

fn taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f32 / dst as f32;
    (0..dst)
        .map(|i| {
            let pos = ((i as f32 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: pos - lo as f32,
            }
        })
        .collect()
}

impl ResizePad {
    pub fn forward(&self, input: &[f32], out: &mut [f32]) {
        out.fill(0.0);
        let ys = taps(self.h, self.size);
        let xs = taps(self.w, self.size);
        for c in 0..self.channels {
            let plane = &input[c * self.h * self.w..(c + 1) * self.h * self.w];
            let dst = &mut out[c * self.h * self.w..(c + 1) * self.h * self.w];
            for (oy, ty) in ys.iter().enumerate() {
                for (ox, tx) in xs.iter().enumerate() {
                    let at = |y: usize, x: usize| plane[y * self.w + x];
                    let top = at(ty.lo, tx.lo) * (1.0 - tx.frac) + at(ty.lo, tx.hi) * tx.frac;
                    let bottom = at(ty.hi, tx.lo) * (1.0 - tx.frac) + at(ty.hi, tx.hi) * tx.frac;
                    dst[(oy + self.top) * self.w + ox + self.left] = top * (1.0 - ty.frac) + bottom * ty.frac;
                }
            }
        }
    }

    pub fn backward(&self, grad_out: &[f32], grad_input: &mut [f32]) {
        let ys = taps(self.h, self.size);
        let xs = taps(self.w, self.size);
        for c in 0..self.channels {
            let go = &grad_out[c * self.h * self.w..(c + 1) * self.h * self.w];
            let gi = &mut grad_input[c * self.h * self.w..(c + 1) * self.h * self.w];
            for (oy, ty) in ys.iter().enumerate() {
                for (ox, tx) in xs.iter().enumerate() {
                    let g = go[(oy + self.top) * self.w + ox + self.left];
                    let gt = g * (1.0 - ty.frac);
                    let gb = g * ty.frac;
                    gi[ty.lo * self.w + tx.lo] += gt * (1.0 - tx.frac);
                    gi[ty.lo * self.w + tx.hi] += gt * tx.frac;
                    gi[ty.hi * self.w + tx.lo] += gb * (1.0 - tx.frac);
                    gi[ty.hi * self.w + tx.hi] += gb * tx.frac;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &[f32], kernel: &[f32], g: &ConvGeometry) -> Vec<f32> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.c_out * oh * ow];
        for co in 0..g.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..g.c_in {
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                let y = (oy * g.stride + i) as isize - g.padding as isize;
                                let x = (ox * g.stride + j) as isize - g.padding as isize;
                                if y >= 0 && x >= 0 && (y as usize) < g.h && (x as usize) < g.w {
                                    s += input[(ci * g.h + y as usize) * g.w + x as usize]
                                        * kernel[((co * g.c_in + ci) * g.kh + i) * g.kw + j];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for &(stride, padding, k) in &[(1, 0, 3), (2, 1, 3), (1, 2, 5), (1, 0, 1), (2, 0, 1)] {
            let g = ConvGeometry {
                c_in: 2,
                h: 7,
                w: 6,
                c_out: 3,
                kh: k,
                kw: k,
                stride,
                padding,
            };
            let input: Vec<f32> = (0..2 * 7 * 6).map(|i| ((i * 37) % 11) as f32 - 5.0).collect();
            let kernel: Vec<f32> = (0..3 * 2 * k * k).map(|i| ((i * 13) % 7) as f32 - 3.0).collect();
            let mut out = vec![0.0; 3 * g.out_h() * g.out_w()];
            conv2d_forward(&input, &kernel, None, &g, &mut out);
            assert_eq!(out, naive_conv(&input, &kernel, &g));
        }
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let rp = ResizePad {
            channels: 2,
            h: 5,
            w: 5,
            size: 5,
            top: 0,
            left: 0,
        };
        let input: Vec<f32> = (0..50).map(|i| i as f32 * 0.1).collect();
        let mut out = vec![0.0; 50];
        rp.forward(&input, &mut out);
        assert_eq!(out, input);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let rp = ResizePad {
            channels: 1,
            h: 8,
            w: 8,
            size: 6,
            top: 1,
            left: 2,
        };
        let x: Vec<f32> = (0..64).map(|i| ((i * 7) % 5) as f32).collect();
        let y: Vec<f32> = (0..64).map(|i| ((i * 3) % 4) as f32 - 1.0).collect();
        let mut ax = vec![0.0; 64];
        rp.forward(&x, &mut ax);
        let mut aty = vec![0.0; 64];
        rp.backward(&y, &mut aty);
        let lhs: f32 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }
}
