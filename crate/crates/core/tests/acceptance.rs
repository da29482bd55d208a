//! Acceptance checks, one line per criterion. Runs as a plain binary so
//! every criterion reports even when an earlier one fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{conv_params, max_abs_diff, naive_conv, reference_layers, rng, synth_samples, uniform};
use iccnn::density::{downsample_sum, gaussian_density, DotAnnotations, Point};
use iccnn::eval::{evaluate, mae, rmse, EvalRecord};
use iccnn::gradient_suite::run_suite;
use iccnn::io::synth::write_dataset;
use iccnn::io::{load_checkpoint, load_dataset, save_checkpoint, Checkpoint, Snapshot, SynthSpec};
use iccnn::train::{random_crop, train_multi_stage, train_single_stage, train_step, Sgd};
use iccnn::{Error, NetConfig, Network, Resolution, Tape, TrainConfig, Variant};
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = run_suite(7).map_err(|e| e.to_string())?;
    for r in &results {
        ensure(r.passed(), r.summary())?;
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    let worst = results.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    Ok(format!("{} checks, worst relative error {worst:.2e}", results.len()))
}

fn conv_oracle() -> Outcome {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let k = [1, 3, 5, 7][r.random_range(0..4)];
        let (c, o) = (r.random_range(1..8), r.random_range(1..8));
        let (h, w) = (r.random_range(1..20), r.random_range(1..20));
        let x = uniform(&mut r, &[c, h, w]);
        let wt = uniform(&mut r, &[o, c, k, k]);
        let b = uniform(&mut r, &[o]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, bv).map_err(|e| e.to_string())?;
        let diff = max_abs_diff(tape.value(y).data(), &naive_conv(&x, &wt, &b));
        ensure(diff < 1e-10, format!("case {case} (k={k}, {c}->{o}, {h}x{w}): diff {diff:e}"))?;
        worst = worst.max(diff);
    }
    Ok(format!("50 cases, max abs diff {worst:.1e}"))
}

fn count_conservation() -> Outcome {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for set in 0..100 {
        let n = if set == 0 { 0 } else { r.random_range(0..=500) };
        let (h, w) = (8 * r.random_range(4..13), 8 * r.random_range(4..13));
        let points = (0..n)
            .map(|_| Point { x: r.random_range(0.0..w as f64), y: r.random_range(0.0..h as f64) })
            .collect();
        let ann = DotAnnotations::new(points, w, h).map_err(|e| e.to_string())?;
        let sigma = r.random_range(1.0..8.0);
        let y = gaussian_density(&ann, sigma).map_err(|e| e.to_string())?;
        let err = (y.sum() - n as f64).abs();
        ensure(err < 1e-6 * (n as f64).max(1.0), format!("set {set}: N={n}, sum {}", y.sum()))?;
        worst = worst.max(err);
        for f in [2, 4, 8] {
            let z = downsample_sum(&y, f).map_err(|e| e.to_string())?;
            let d = (z.sum() - y.sum()).abs();
            ensure(d < 1e-9, format!("set {set}: factor {f} changed the sum by {d:e}"))?;
        }
    }
    Ok(format!("100 sets, worst count error {worst:.1e}"))
}

fn shape_contract() -> Outcome {
    let start = Instant::now();
    let net = Network::new(NetConfig::default()).map_err(|e| e.to_string())?;
    let mut r = rng(4);
    for _ in 0..20 {
        let (h, w) = (4 * r.random_range(1..17), 4 * r.random_range(1..17));
        let image = uniform(&mut r, &[3, h, w]);
        let out = net.predict(&image).map_err(|e| e.to_string())?;
        ensure(out.y_hat.dims() == (h, w), format!("{h}x{w}: HR output {:?}", out.y_hat.dims()))?;
        ensure(out.z_hat.dims() == (h / 4, w / 4), format!("{h}x{w}: LR output {:?}", out.z_hat.dims()))?;
    }
    for res in Resolution::ALL {
        let net = Network::new(NetConfig { lr_resolution: res, ..NetConfig::default() }).map_err(|e| e.to_string())?;
        let d = res.divisor();
        let (h, w) = (4 * d.max(4), 3 * d.max(4));
        let out = net.predict(&uniform(&mut r, &[3, h, w])).map_err(|e| e.to_string())?;
        ensure(out.z_hat.dims() == (h / d, w / d), format!("LR at {res}: {:?}", out.z_hat.dims()))?;
        ensure(out.y_hat.dims() == (h, w), format!("HR with LR at {res}: {:?}", out.y_hat.dims()))?;
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok("20 sizes and 4 LR resolutions".into())
}

/// Full-width training on this data diverges from 1e-6 up.
const OVERFIT_LEARNING_RATE: f64 = 5e-8;
const OVERFIT_MOMENTUM: f64 = 0.9;

fn overfit() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig {
        learning_rate: OVERFIT_LEARNING_RATE,
        momentum: OVERFIT_MOMENTUM,
        crop_fraction: 1.0,
        iterations: 500,
        lambda_l: 1e-2,
        lambda_h: 1e2,
        ..TrainConfig::default()
    };
    let samples = synth_samples(4, 48, 1, &cfg);
    let (net, log) = train_single_stage(&samples, &cfg).map_err(|e| e.to_string())?;
    let records = evaluate(&net, &samples).map_err(|e| e.to_string())?;
    let mean_gt = records.iter().map(|r| r.gt).sum::<f64>() / records.len() as f64;
    let rel = mae(&records).map_err(|e| e.to_string())? / mean_gt;
    let window = 50;
    let averages: Vec<f64> = log.windows(window).map(|w| w.iter().map(|r| r.loss).sum::<f64>() / window as f64).collect();
    let first = (cfg.iterations / 5).saturating_sub(window - 1);
    let rises = averages[first..].windows(2).filter(|p| p[1] > p[0]).count();
    let elapsed = start.elapsed();
    let summary = format!(
        "MAE {:.2}% of mean count {mean_gt:.2}, {rises} rises in the moving average, {elapsed:.0?}",
        100.0 * rel
    );
    ensure(rel < 0.05, summary.clone())?;
    ensure(rises == 0, summary.clone())?;
    within(elapsed, Duration::from_secs(600))?;
    Ok(summary)
}

fn freezing() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        stages: 2,
        width_divisor: 4,
        crop_fraction: 0.5,
        iterations: 20,
        learning_rate: 1e-7,
        ..TrainConfig::default()
    };
    let samples = synth_samples(4, 48, 6, &cfg);
    let path = dir.path().join("stage1.ckpt");
    let (net, _) = train_multi_stage(&samples, &cfg, |k, net, _| {
        if k == 1 {
            save_checkpoint(&path, &Checkpoint::from_network(net, Snapshot::new(cfg.clone(), 1)))?;
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let saved = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for (name, t) in net.named_tensors() {
        let Some((_, s)) = saved.tensors.iter().find(|(n, _)| *n == name) else {
            return Err(format!("{name} missing from checkpoint"));
        };
        let same = t.data().iter().zip(s.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if name.starts_with("stage1.") {
            ensure(same, format!("{name} changed while training stage 2"))?;
            compared += 1;
        } else {
            ensure(!same, format!("{name} did not train"))?;
        }
    }
    Ok(format!("{compared} stage-1 tensors bit-identical"))
}

fn param_count() -> Outcome {
    let start = Instant::now();
    let net = Network::new(NetConfig::default()).map_err(|e| e.to_string())?;
    let expect: Vec<usize> = reference_layers().into_iter().map(|(_, k, i, o)| conv_params(k, i, o)).collect();
    let got: Vec<usize> = net.param_breakdown().iter().map(|l| l.count).collect();
    ensure(got == expect, format!("breakdown {got:?} vs {expect:?}"))?;
    let total = net.param_count();
    ensure(total == expect.iter().sum::<usize>(), "total differs from breakdown")?;
    let ratio = total as f64 / 7.9e6;
    ensure((0.5..=2.0).contains(&ratio), format!("total {total} is {ratio:.2}x the reference"))?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("total {total} ({ratio:.2}x of 7.9e6)"))
}

fn metrics() -> Outcome {
    let recs: Vec<EvalRecord> = [(502.0, 512.0), (270.0, 280.0), (86.0, 89.0)]
        .iter()
        .enumerate()
        .map(|(i, &(g, p))| EvalRecord::new(format!("{i}"), g, p))
        .collect();
    let (m, s) = (mae(&recs).map_err(|e| e.to_string())?, rmse(&recs).map_err(|e| e.to_string())?);
    ensure((m - 7.667).abs() < 1e-3 && (s - 8.347).abs() < 1e-3, format!("MAE {m}, RMSE {s}"))?;
    let mut r = rng(8);
    for set in 0..1000 {
        let n = r.random_range(1..50);
        let recs: Vec<EvalRecord> = (0..n)
            .map(|i| EvalRecord::new(format!("{i}"), r.random_range(0.0..1000.0), r.random_range(0.0..1000.0)))
            .collect();
        let (m, s) = (mae(&recs).unwrap(), rmse(&recs).unwrap());
        ensure(s >= m, format!("set {set}: RMSE {s} < MAE {m}"))?;
    }
    Ok(format!("MAE {m:.3}, RMSE {s:.3}; RMSE >= MAE on 1000 sets"))
}

fn ablations() -> Outcome {
    let start = Instant::now();
    let count = |variant| Network::new(NetConfig { variant, ..NetConfig::default() }).map(|n| n.param_count());
    let full = count(Variant::Full).map_err(|e| e.to_string())?;
    for variant in [Variant::HrAlone, Variant::LrAlone] {
        let c = count(variant).map_err(|e| e.to_string())?;
        ensure(full > c, format!("full {full} vs {variant} {c}"))?;
    }
    for variant in Variant::ALL {
        let cfg = TrainConfig { variant, width_divisor: 4, crop_fraction: 1.0, learning_rate: 1e-7, ..TrainConfig::default() };
        let samples = synth_samples(1, 32, 9, &cfg);
        let mut net = Network::new(cfg.net_config()).map_err(|e| e.to_string())?;
        let before = net.clone();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let s = &samples[0];
        let crop = random_crop(&s.image, &s.density, 1.0, cfg.lr_resolution, &mut r).map_err(|e| e.to_string())?;
        let rec = train_step(&mut net, &mut Sgd::new(cfg.learning_rate, cfg.momentum), &crop, &cfg, 1, 0)
            .map_err(|e| format!("{variant}: {e}"))?;
        ensure(rec.loss.is_finite(), format!("{variant}: loss {}", rec.loss))?;
        ensure(net != before, format!("{variant}: parameters unchanged"))?;
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!("5 variants stepped; full has {full} parameters"))
}

fn io_round_trips() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = TrainConfig { stages: 2, width_divisor: 2, ..TrainConfig::default() };
    let net = Network::new(cfg.net_config()).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::from_network(&net, Snapshot::new(cfg.clone(), 2));
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &ckpt).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    ensure(back == ckpt, "checkpoint changed on disk")?;
    ensure(back.to_network().map_err(|e| e.to_string())? == net, "rebuilt network differs")?;

    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    for len in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
        match Checkpoint::from_bytes(&bytes[..len]) {
            Err(Error::Corrupt(_)) | Err(Error::Format(_)) => {}
            other => return Err(format!("truncated to {len} bytes: {other:?}")),
        }
    }

    let spec = SynthSpec { images: 5, size: 48, min_count: 0, max_count: 30, seed: 10 };
    let root = dir.path().join("synth");
    let written = write_dataset(&spec, &root).map_err(|e| e.to_string())?;
    let loaded = load_dataset(&root).map_err(|e| e.to_string())?;
    ensure(written.len() == loaded.len(), "image count differs")?;
    for (w, l) in written.iter().zip(&loaded) {
        ensure(w.stem == l.stem && w.annotations == l.annotations, format!("{} annotations differ", w.stem))?;
        ensure(w.rgb.to_tensor() == l.image, format!("{} pixels differ", w.stem))?;
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("{} tensors bit-exact, truncations rejected, {} synthetic images exact", ckpt.tensors.len(), loaded.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("convolution oracle", conv_oracle),
        ("count conservation", count_conservation),
        ("shape contract", shape_contract),
        ("overfit convergence", overfit),
        ("multi-stage freezing", freezing),
        ("parameter count", param_count),
        ("metric fidelity", metrics),
        ("ablation variants", ablations),
        ("i/o round trips", io_round_trips),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{took:.1?}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{took:.1?}]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
