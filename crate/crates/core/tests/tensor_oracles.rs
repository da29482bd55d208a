mod common;

use common::{max_abs_diff, naive_bilinear, naive_conv, naive_maxpool, rng, uniform};
use iccnn::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn tape_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut t = Tape::new();
    let (x, w, b) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
    let y = t.conv2d(x, w, b).unwrap();
    t.value(y).data().to_vec()
}

#[test]
fn conv_matches_nested_loops_on_random_shapes() {
    let mut r = rng(2024);
    for _ in 0..50 {
        let k = [1, 3, 5, 7][r.random_range(0..4)];
        let (c, o) = (r.random_range(1..6), r.random_range(1..6));
        let (h, w) = (r.random_range(1..12), r.random_range(1..12));
        let x = uniform(&mut r, &[c, h, w]);
        let wt = uniform(&mut r, &[o, c, k, k]);
        let b = uniform(&mut r, &[o]);
        let diff = max_abs_diff(&tape_conv(&x, &wt, &b), &naive_conv(&x, &wt, &b));
        assert!(diff < 1e-10, "k={k} c={c} o={o} {h}x{w}: diff {diff}");
    }
}

#[test]
fn conv_kernel_larger_than_input() {
    let mut r = rng(5);
    let x = uniform(&mut r, &[2, 2, 3]);
    let w = uniform(&mut r, &[3, 2, 7, 7]);
    let b = uniform(&mut r, &[3]);
    assert!(max_abs_diff(&tape_conv(&x, &w, &b), &naive_conv(&x, &w, &b)) < 1e-12);
}

#[test]
fn maxpool_matches_brute_force() {
    let mut r = rng(9);
    for (c, h, w) in [(1, 2, 2), (3, 5, 7), (2, 8, 6), (1, 3, 2)] {
        let x = uniform(&mut r, &[c, h, w]);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = t.maxpool2(v).unwrap();
        assert_eq!(t.value(y).shape(), &[c, h / 2, w / 2]);
        assert_eq!(t.value(y).data(), naive_maxpool(&x).as_slice());
    }
}

#[test]
fn relu_is_elementwise_max_with_zero() {
    let mut r = rng(1);
    let x = uniform(&mut r, &[3, 4, 5]);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = t.relu(v).unwrap();
    let expect: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    assert_eq!(t.value(y).data(), expect.as_slice());
}

#[test]
fn bilinear_matches_pointwise_formula() {
    let mut r = rng(3);
    for (f, (c, h, w)) in [(2, (2, 3, 4)), (4, (1, 2, 5)), (8, (1, 3, 3)), (2, (1, 1, 1))] {
        let x = uniform(&mut r, &[c, h, w]);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = t.upsample(v, f).unwrap();
        assert!(max_abs_diff(t.value(y).data(), &naive_bilinear(&x, f)) < 1e-12);
    }
}

#[test]
fn block_sum_matches_brute_force() {
    let mut r = rng(4);
    let x = uniform(&mut r, &[2, 8, 4]);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = t.block_sum(v, 4).unwrap();
    let d = x.data();
    let expect: Vec<f64> = (0..2)
        .flat_map(|c| {
            (0..2).map(move |by| {
                (0..4)
                    .flat_map(|dy| (0..4).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| d[(c * 8 + by * 4 + dy) * 4 + dx])
                    .sum::<f64>()
            })
        })
        .collect();
    assert!(max_abs_diff(t.value(y).data(), &expect) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_is_linear_in_input(seed in any::<u64>(), a in -3.0f64..3.0) {
        let mut r = rng(seed);
        let x1 = uniform(&mut r, &[2, 5, 6]);
        let x2 = uniform(&mut r, &[2, 5, 6]);
        let w = uniform(&mut r, &[3, 2, 3, 3]);
        let zero = Tensor::zeros(&[3]);
        let mix = Tensor::from_fn(&[2, 5, 6], |i| a * x1.data()[i] + x2.data()[i]);
        let lhs = tape_conv(&mix, &w, &zero);
        let y1 = tape_conv(&x1, &w, &zero);
        let y2 = tape_conv(&x2, &w, &zero);
        let rhs: Vec<f64> = y1.iter().zip(&y2).map(|(p, q)| a * p + q).collect();
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-10);
    }

    #[test]
    fn upsample_then_block_sum_scales_mass(seed in any::<u64>(), f in prop::sample::select(vec![2usize, 4, 8])) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[1, 3, 4]);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let up = t.upsample(v, f).unwrap();
        let back = t.block_sum(up, f).unwrap();
        let total: f64 = t.value(back).data().iter().sum();
        let expect = x.data().iter().sum::<f64>() * (f * f) as f64;
        prop_assert!((total - expect).abs() < 1e-9 * expect.abs().max(1.0));
    }
}
