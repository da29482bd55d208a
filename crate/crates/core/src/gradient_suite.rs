//! Finite-difference checks for every tape operation and for a scaled-down
//! network trained end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::density::Resolution;
use crate::model::{NetConfig, Network, Variant};
use crate::tensor::gradcheck::{grad_check, sse_difference, GradCheckReport, Probe};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::iccnn_loss;

pub const EPS: f64 = 1e-6;
pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }

    pub fn summary(&self) -> String {
        format!(
            "{:<28} {} max_rel_err {:.3e} (tol {:.0e}, {} elements)",
            self.name,
            if self.passed() { "ok  " } else { "FAIL" },
            self.report.max_rel_error,
            self.tolerance,
            self.report.checked
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sse(op(params), target)` with random parameters of the given shapes and
/// a random target, so every output element carries a distinct upstream
/// gradient.
fn layer_check<F>(name: &str, rng: &mut ChaCha8Rng, shapes: &[&[usize]], out_shape: &[usize], op: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let params: Vec<Tensor> = shapes.iter().map(|s| uniform(rng, s)).collect();
    let target = uniform(rng, out_shape);
    let report = grad_check(op, &params, &target, EPS, Probe::All)?;
    Ok(CheckResult {
        name: name.to_string(),
        report,
        tolerance: LAYER_TOLERANCE,
    })
}

/// One check per tape operation on random inputs in `[-1, 1]`.
pub fn layer_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    for (k, cin, cout, h, w) in [(1, 3, 2, 4, 5), (3, 2, 3, 5, 4), (5, 2, 2, 6, 6), (7, 1, 2, 5, 7)] {
        let shapes: [&[usize]; 3] = [&[cin, h, w], &[cout, cin, k, k], &[cout]];
        out.push(layer_check(&format!("conv2d {k}x{k}"), r, &shapes, &[cout, h, w], |t, v| {
            t.conv2d(v[0], v[1], v[2])
        })?);
    }
    out.push(layer_check("maxpool2 (odd extents)", r, &[&[2, 5, 7]], &[2, 2, 3], |t, v| t.maxpool2(v[0]))?);
    out.push(layer_check("relu", r, &[&[2, 4, 4]], &[2, 4, 4], |t, v| t.relu(v[0]))?);
    out.push(layer_check("upsample x2", r, &[&[2, 3, 4]], &[2, 6, 8], |t, v| t.upsample2(v[0]))?);
    out.push(layer_check("upsample x4", r, &[&[1, 3, 2]], &[1, 12, 8], |t, v| t.upsample(v[0], 4))?);
    out.push(layer_check("block sum x2", r, &[&[2, 4, 6]], &[2, 2, 3], |t, v| t.block_sum(v[0], 2))?);
    out.push(layer_check("block sum x4", r, &[&[1, 8, 4]], &[1, 2, 1], |t, v| t.block_sum(v[0], 4))?);
    out.push(layer_check(
        "concat channels",
        r,
        &[&[2, 3, 3], &[1, 3, 3], &[3, 3, 3]],
        &[6, 3, 3],
        |t, v| t.concat_channels(v),
    )?);
    out.push(layer_check("scale", r, &[&[3, 2, 2]], &[3, 2, 2], |t, v| t.scale(v[0], -2.5))?);
    out.push(layer_check("add", r, &[&[2, 3, 3], &[2, 3, 3]], &[2, 3, 3], |t, v| t.add(v[0], v[1]))?);
    out.push(layer_check("sum", r, &[&[2, 3, 3]], &[1], |t, v| t.sum(v[0]))?);
    out.push(layer_check("sum squared error", r, &[&[2, 3, 3], &[2, 3, 3]], &[1], |t, v| {
        t.sum_squared_error(v[0], v[1])
    })?);
    Ok(out)
}

/// Stage-`k` outputs `(z_hat, y_hat)` and, when requested, a copy of `net`
/// carrying gradients of the unit-weighted two-term loss.
fn stage_pass(
    net: &Network,
    image: &Tensor,
    z_t: &Tensor,
    y_t: &Tensor,
    k: usize,
    grads: bool,
) -> Result<(Vec<f64>, Vec<f64>, Option<Network>)> {
    let mut tape = Tape::new();
    let (vars, binding) = net.forward_for_training(&mut tape, image, k)?;
    let z_hat = tape.value(vars.z_hat).data().to_vec();
    let y_hat = tape.value(vars.y_hat).data().to_vec();
    if !grads {
        return Ok((z_hat, y_hat, None));
    }
    let z = tape.constant(z_t.clone());
    let y = tape.constant(y_t.clone());
    let loss = iccnn_loss(&mut tape, vars.z_hat, z, vars.y_hat, y, 1.0, 1.0)?;
    let g = tape.backward(loss.total)?;
    let mut with_grads = net.clone();
    with_grads.stage_mut(k).install_grads(&binding, &g)?;
    Ok((z_hat, y_hat, Some(with_grads)))
}

/// Compares backpropagated gradients of every stage-`k` parameter of `net`
/// with central differences of step `eps`, probing `per_tensor` evenly
/// spaced elements of each tensor.
///
/// Biases start at exactly zero, which puts every unit fed only by dead
/// inputs on its ReLU kink. The check therefore runs on a copy whose biases
/// are drawn from `[-0.1, 0.1]`, where the loss is differentiable.
pub fn network_check(
    name: &str,
    net: &Network,
    image: &Tensor,
    k: usize,
    per_tensor: usize,
    eps: f64,
    seed: u64,
) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jittered = net.clone();
    for (n, t) in jittered.named_tensors_mut() {
        if n.ends_with(".bias") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let net = &jittered;
    let (_, h, w) = image.chw()?;
    let d = net.config().lr_resolution.divisor();
    let z_t = uniform(&mut rng, &[1, h / d, w / d]);
    let y_t = uniform(&mut rng, &[1, h, w]);
    let (_, _, analytic) = stage_pass(net, image, &z_t, &y_t, k, true)?;
    let analytic = analytic.expect("gradients requested");
    let prefix = format!("stage{k}.");
    let names: Vec<String> = net
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| n.starts_with(&prefix))
        .collect();
    if names.is_empty() {
        return Err(Error::config(format!("stage {k} has no parameters")));
    }
    let lookup = |net: &Network, name: &str| -> Tensor {
        net.named_tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .expect("name taken from this network")
    };
    let mut work = net.clone();
    let mut report = GradCheckReport::new();
    for (t, name) in names.iter().enumerate() {
        let grad = lookup(&analytic, name).grad().map(<[f64]>::to_vec).unwrap_or_default();
        let numel = lookup(net, name).numel();
        let idx: Vec<usize> = if per_tensor >= numel {
            (0..numel).collect()
        } else {
            let mut v: Vec<usize> = (0..per_tensor).map(|i| i * (numel - 1) / (per_tensor - 1).max(1)).collect();
            v.dedup();
            v
        };
        for e in idx {
            let orig = lookup(net, name).data()[e];
            let mut eval_at = |value: f64| -> Result<(Vec<f64>, Vec<f64>)> {
                for (n, p) in work.named_tensors_mut() {
                    if n == *name {
                        p.data_mut()[e] = value;
                    }
                }
                let (z, y, _) = stage_pass(&work, image, &z_t, &y_t, k, false)?;
                Ok((z, y))
            };
            let plus = eval_at(orig + eps)?;
            let minus = eval_at(orig - eps)?;
            eval_at(orig)?;
            let change = sse_difference(&plus.0, &minus.0, z_t.data()) + sse_difference(&plus.1, &minus.1, y_t.data());
            report.record(t, e, grad.get(e).copied().unwrap_or(0.0), change / (2.0 * eps));
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        report,
        tolerance: NETWORK_TOLERANCE,
    })
}

/// Scaled-down network used by the end-to-end checks: one eighth of the
/// reference widths on a 16x16 input.
pub fn tiny_network(stages: usize, seed: u64) -> Result<(Network, Tensor)> {
    let net = Network::new(NetConfig {
        variant: Variant::Full,
        lr_resolution: Resolution::Quarter,
        stages,
        width_divisor: 8,
        seed,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a9e);
    let image = Tensor::from_fn(&[3, 16, 16], |_| rng.random_range(0.0..1.0));
    Ok((net, image))
}

/// Every layer check plus end-to-end checks of a one-stage network and of
/// the second stage of a two-stage network.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = layer_checks(seed)?;
    let (net, image) = tiny_network(1, seed)?;
    results.push(network_check("network, one stage", &net, &image, 1, 6, EPS, seed)?);
    let (net, image) = tiny_network(2, seed)?;
    results.push(network_check("network, stage 2 of 2", &net, &image, 2, 4, EPS, seed)?);
    Ok(results)
}
