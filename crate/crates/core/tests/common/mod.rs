#![allow(dead_code)]

use iccnn::io::synth::{generate, SynthSpec};
use iccnn::{Tensor, TrainConfig, TrainSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Zero-padded "same" convolution written as six plain loops.
pub fn naive_conv(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (o, k) = (weight.shape()[0], weight.shape()[2]);
    let p = (k / 2) as isize;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; o * h * w];
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias.data()[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - p;
                            let sx = xx as isize + kx as isize - p;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += wt[((oc * c + ic) * k + ky) * k + kx] * x[(ic * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(oc * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

/// 2x2 stride-2 max, odd trailing row/column dropped.
pub fn naive_maxpool(input: &Tensor) -> Vec<f64> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let x = input.data();
    let mut out = Vec::new();
    for ch in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let mut m = f64::NEG_INFINITY;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    m = m.max(x[(ch * h + 2 * y + dy) * w + 2 * xx + dx]);
                }
                out.push(m);
            }
        }
    }
    out
}

/// Half-pixel-centred bilinear resize by an integer factor, with edge
/// clamping, evaluated pointwise.
pub fn naive_bilinear(input: &Tensor, f: usize) -> Vec<f64> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let x = input.data();
    let coord = |o: usize, n: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::new();
    for ch in 0..c {
        for oy in 0..h * f {
            let (y0, y1, ty) = coord(oy, h);
            for ox in 0..w * f {
                let (x0, x1, tx) = coord(ox, w);
                let at = |y: usize, xx: usize| x[(ch * h + y) * w + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `(branch, kernel, in, out)` for the default single-stage network,
/// written out by hand from the reference layer tables.
pub fn reference_layers() -> Vec<(&'static str, usize, usize, usize)> {
    let fusion_in = 24 + 32 + 1;
    vec![
        ("lr", 3, 3, 64),
        ("lr", 3, 64, 64),
        ("lr", 3, 64, 128),
        ("lr", 3, 128, 128),
        ("lr", 3, 128, 256),
        ("lr", 3, 256, 256),
        ("lr", 3, 256, 256),
        ("lr", 7, 256, 196),
        ("lr", 5, 196, 96),
        ("lr", 3, 96, 32),
        ("lr", 1, 32, 1),
        ("hr", 7, 3, 16),
        ("hr", 5, 16, 24),
        ("hr", 3, 24, 48),
        ("hr", 3, 48, 48),
        ("hr", 3, 48, 24),
        ("hr", 7, fusion_in, 196),
        ("hr", 5, 196, 96),
        ("hr", 3, 96, 32),
        ("hr", 1, 32, 1),
    ]
}

pub fn conv_params(k: usize, cin: usize, cout: usize) -> usize {
    k * k * cin * cout + cout
}

/// Synthetic samples ready for training, padded for `cfg`.
pub fn synth_samples(images: usize, size: usize, seed: u64, cfg: &TrainConfig) -> Vec<TrainSample> {
    let spec = SynthSpec {
        images,
        size,
        min_count: 5,
        max_count: 20,
        seed,
    };
    let m = cfg.net_config().input_multiple();
    generate(&spec)
        .unwrap()
        .iter()
        .map(|i| TrainSample::new(i.stem.clone(), &i.rgb.to_tensor(), &i.annotations, cfg.sigma, m).unwrap())
        .collect()
}

/// Small, fast configuration for structural training tests.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        width_divisor: 8,
        crop_fraction: 1.0,
        iterations: 3,
        learning_rate: 1e-8,
        ..TrainConfig::default()
    }
}
