//! Slice-level forward and backward kernels.
//!
//! All feature maps are `[C, H, W]` row-major. Convolutions are stride one
//! with zero same-padding and run as im2col followed by a GEMM.

/// Geometry of a same-padded, stride-one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds every `k x k` window into a column: `cols[(ci, ki, kj), (i, j)]`.
fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let pad = (k / 2) as isize;
    let plane = g.plane();
    let mut cols = vec![0.0; g.patch_len() * plane];
    for ci in 0..g.in_channels {
        let src = &input[ci * plane..(ci + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                let j_lo = (-dj).max(0) as usize;
                let j_hi = (w as isize - dj).min(w as isize).max(0) as usize;
                if j_lo >= j_hi {
                    continue;
                }
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let si = si as usize;
                    let s0 = (si * w) as isize + j_lo as isize + dj;
                    let s0 = s0 as usize;
                    dst[i * w + j_lo..i * w + j_hi].copy_from_slice(&src[s0..s0 + (j_hi - j_lo)]);
                }
            }
        }
    }
    cols
}

/// Scatters columns back onto the input grid, accumulating overlaps.
fn col2im(cols: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let pad = (k / 2) as isize;
    let plane = g.plane();
    for ci in 0..g.in_channels {
        let dst = &mut out[ci * plane..(ci + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                let j_lo = (-dj).max(0) as usize;
                let j_hi = (w as isize - dj).min(w as isize).max(0) as usize;
                if j_lo >= j_hi {
                    continue;
                }
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let s0 = (si as usize * w) as isize + j_lo as isize + dj;
                    let s0 = s0 as usize;
                    let d = &mut dst[s0..s0 + (j_hi - j_lo)];
                    for (a, b) in d.iter_mut().zip(&src[i * w + j_lo..i * w + j_hi]) {
                        *a += *b;
                    }
                }
            }
        }
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, all row-major unless
/// the strides say otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers size every buffer so that the strided extents
    // (m, k), (k, n) and (m, n) stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(input: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plane = g.plane();
    let patch = g.patch_len();
    let mut out = vec![0.0; g.out_channels * plane];
    for (co, row) in out.chunks_mut(plane).enumerate() {
        row.fill(bias[co]);
    }
    let cols = im2col(input, g);
    gemm(
        g.out_channels,
        patch,
        plane,
        weight,
        (patch as isize, 1),
        &cols,
        (plane as isize, 1),
        1.0,
        &mut out,
    );
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

/// Backward of [`conv2d_forward`]; only the requested gradients are formed.
pub fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    g: &ConvGeometry,
    need: (bool, bool, bool),
) -> ConvGrads {
    let plane = g.plane();
    let patch = g.patch_len();
    let (need_input, need_weight, need_bias) = need;

    let bias = need_bias.then(|| grad_out.chunks(plane).map(|r| r.iter().sum()).collect());

    let weight_grad = need_weight.then(|| {
        let cols = im2col(input, g);
        let mut gw = vec![0.0; g.out_channels * patch];
        // grad_out [Cout x HW] * cols^T [HW x patch]
        gemm(
            g.out_channels,
            plane,
            patch,
            grad_out,
            (plane as isize, 1),
            &cols,
            (1, plane as isize),
            0.0,
            &mut gw,
        );
        gw
    });

    let input_grad = need_input.then(|| {
        let mut gcols = vec![0.0; patch * plane];
        // weight^T [patch x Cout] * grad_out [Cout x HW]
        gemm(
            patch,
            g.out_channels,
            plane,
            weight,
            (1, patch as isize),
            grad_out,
            (plane as isize, 1),
            0.0,
            &mut gcols,
        );
        let mut gi = vec![0.0; g.in_channels * plane];
        col2im(&gcols, g, &mut gi);
        gi
    });

    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias,
    }
}

/// 2x2 stride-2 max pooling. Returns the pooled map and, per output cell,
/// the flat input index of the winning element (first maximum in row-major
/// scan order). Trailing odd rows/columns are ignored.
pub fn maxpool2_forward(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let candidates = [
                    base + 2 * i * w + 2 * j,
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward(grad_out: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut gi = vec![0.0; input_len];
    for (&g, &idx) in grad_out.iter().zip(argmax) {
        gi[idx] += g;
    }
    gi
}

/// Source taps for one axis of half-pixel bilinear upsampling by `factor`:
/// `(lo, hi, weight_lo, weight_hi)` per output coordinate.
fn bilinear_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let t = src - lo as f64;
            (lo, hi, 1.0 - t, t)
        })
        .collect()
}

pub fn upsample_bilinear_forward(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<f64> {
    let rows = bilinear_taps(h, factor);
    let cols = bilinear_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (i, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
            for (j, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                dst[i * ow + j] = wr0 * (wc0 * src[r0 * w + c0] + wc1 * src[r0 * w + c1])
                    + wr1 * (wc0 * src[r1 * w + c0] + wc1 * src[r1 * w + c1]);
            }
        }
    }
    out
}

/// Exact transpose of [`upsample_bilinear_forward`].
pub fn upsample_bilinear_backward(
    grad_out: &[f64],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<f64> {
    let rows = bilinear_taps(h, factor);
    let cols = bilinear_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut gi = vec![0.0; c * h * w];
    for ch in 0..c {
        let go = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut gi[ch * h * w..(ch + 1) * h * w];
        for (i, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
            for (j, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                let g = go[i * ow + j];
                dst[r0 * w + c0] += wr0 * wc0 * g;
                dst[r0 * w + c1] += wr0 * wc1 * g;
                dst[r1 * w + c0] += wr1 * wc0 * g;
                dst[r1 * w + c1] += wr1 * wc1 * g;
            }
        }
    }
    gi
}

/// Sums disjoint `factor x factor` blocks. `h` and `w` must be divisible by `factor`.
pub fn block_sum_forward(input: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..h {
            let orow = ch * oh * ow + (i / factor) * ow;
            let irow = &input[ch * h * w + i * w..ch * h * w + (i + 1) * w];
            for (j, v) in irow.iter().enumerate() {
                out[orow + j / factor] += v;
            }
        }
    }
    out
}

pub fn block_sum_backward(grad_out: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h / factor, w / factor);
    let mut gi = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                gi[ch * h * w + i * w + j] = grad_out[ch * oh * ow + (i / factor) * ow + j / factor];
            }
        }
    }
    gi
}
