use std::path::Path;
use std::process::{Command, Output};

fn iccnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iccnn")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = iccnn(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn err(args: &[&str]) -> String {
    let out = iccnn(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 8] = ["--set", "width_divisor=8", "--iterations", "3", "--learning-rate", "1e-8", "--crop-fraction", "1"];

#[test]
fn synth_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let listing = ok(&["synth", "--out", s(&data), "--images", "3", "--size", "32", "--seed", "4"]);
    assert_eq!(listing.lines().count(), 3);

    let run = dir.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run)];
    args.extend(TINY);
    let model = ok(&args);
    assert_eq!(model.trim(), s(&run.join("model.ckpt")));
    for f in ["config.txt", "stage1.ckpt", "loss_stage1.tsv", "model.ckpt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(run.join("loss_stage1.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(std::fs::read_to_string(run.join("config.txt")).unwrap().contains("width_divisor"));

    let report = ok(&["eval", "--data", s(&data), "--ckpt", s(&run.join("model.ckpt")), "--groups", "3"]);
    assert!(report.lines().any(|l| l.starts_with("MAE ")));
    assert!(report.lines().any(|l| l.starts_with("RMSE ")));
    assert_eq!(std::fs::read_to_string(run.join("model.ckpt.eval.tsv")).unwrap(), report);

    let pred = dir.path().join("pred");
    let image = data.join("images/synth_0000.ppm");
    let ann = data.join("annotations/synth_0000.csv");
    let counts = ok(&[
        "predict",
        "--image",
        s(&image),
        "--ckpt",
        s(&run.join("model.ckpt")),
        "--out",
        s(&pred),
        "--annotations",
        s(&ann),
    ]);
    for f in ["input.ppm", "lr.pgm", "hr.pgm", "gt.pgm", "hr.pgm.txt", "counts.txt"] {
        assert!(pred.join(f).exists(), "{f} missing");
    }
    let value = |key: &str| -> f64 {
        counts.lines().find_map(|l| l.strip_prefix(key)).unwrap().trim().parse().unwrap()
    };
    assert_eq!(value("hr_count "), value("count "));
    let gt = value("gt_count ");
    let sidecar = std::fs::read_to_string(pred.join("gt.pgm.txt")).unwrap();
    let gt_sum: f64 = sidecar.lines().find_map(|l| l.strip_prefix("sum ")).unwrap().parse().unwrap();
    assert!((gt_sum - gt).abs() < 1e-9);
}

#[test]
fn training_resumes_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", s(&data), "--images", "2", "--size", "32"]);
    let first = dir.path().join("first");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&first)];
    args.extend(TINY);
    ok(&args);
    let second = dir.path().join("second");
    let init = first.join("model.ckpt");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&second), "--init", s(&init), "--stages", "2"];
    args.extend(TINY);
    ok(&args);
    assert!(!second.join("stage1.ckpt").exists());
    assert!(second.join("stage2.ckpt").exists());
    let mut args = vec!["train", "--data", s(&data), "--out", s(&second), "--init", s(&init)];
    args.extend(TINY);
    assert!(err(&args).contains("already holds 1 trained stages"));
}

#[test]
fn paramcount_reports_the_default_total() {
    let out = ok(&["paramcount"]);
    assert_eq!(out.lines().last().unwrap(), "total\t5791934");
    assert_eq!(out.lines().count(), 1 + 20 + 1);
    let summed: usize = out
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("total"))
        .map(|l| l.rsplit('\t').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(summed, 5_791_934);
    let hr_alone = ok(&["paramcount", "--variant", "hr-alone"]);
    let total: usize = hr_alone.lines().last().unwrap()["total\t".len()..].parse().unwrap();
    assert!(total < 5_791_934);
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("0 failed"), "{out}");
}

#[test]
fn config_errors_are_reported() {
    assert!(err(&["paramcount", "--set", "learning_rat=1"]).contains("learning_rat"));
    let msg = err(&["paramcount", "--set", "stages=2", "--stages", "3"]);
    assert!(msg.contains("conflicting") && msg.contains("--stages"), "{msg}");
    assert!(err(&["paramcount", "--momentum", "1.5"]).contains("momentum"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "stages = 2\nvariant = sideways\n").unwrap();
    assert!(err(&["paramcount", "--config", s(&cfg)]).contains("line 2"));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "# two stages\nstages = 2\n").unwrap();
    let two = ok(&["paramcount", "--config", s(&cfg)]);
    assert!(two.lines().any(|l| l.starts_with("2\t")));
    let flags_win = ok(&["paramcount", "--config", s(&cfg), "--stages", "1"]);
    assert!(!flags_win.lines().any(|l| l.starts_with("2\t")));
}

#[test]
fn missing_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let msg = err(&["eval", "--data", s(dir.path()), "--ckpt", s(&dir.path().join("none.ckpt"))]);
    assert!(msg.starts_with("error:"), "{msg}");
}
