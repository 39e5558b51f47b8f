use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpn_core::data::{list_images, load_mask, save_gray};

fn dpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn dpn")
}

fn ok(args: &[&str]) -> String {
    let out = dpn(args);
    assert!(
        out.status.success(),
        "dpn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny synthetic DRIVE layout.
fn drive(dir: &Path) -> PathBuf {
    let root = dir.join("drive");
    ok(&["synth", "--data-root", s(&root), "--size", "48x44", "--seed", "3"]);
    root
}

const TINY: [&str; 8] = ["--blocks", "2", "--crop", "32", "--filters", "8,4,4", "--stem", "8"];

fn report_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn ground_truth_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let root = drive(dir.path());
    let preds = dir.path().join("preds");
    fs::create_dir_all(&preds).unwrap();
    for label in list_images(&root.join("test/labels")).unwrap() {
        let id = label.file_stem().unwrap().to_str().unwrap();
        fs::copy(&label, preds.join(format!("{id}_prob.png"))).unwrap();
    }
    let out = dir.path().join("eval");
    ok(&["evaluate", "--data-root", s(&root), "--predictions", s(&preds), "--out", s(&out)]);
    let rows = report_rows(&out.join("report.csv"));
    assert_eq!(rows[0][..7], ["id", "threshold", "se", "sp", "acc", "f1", "auc"]);
    assert_eq!(rows.len(), 1 + 20 + 1);
    let pooled = rows.last().unwrap();
    assert_eq!(pooled[0], "pooled");
    for col in 2..=6 {
        assert_eq!(pooled[col].parse::<f64>().unwrap(), 1.0, "column {}", rows[0][col]);
    }
    assert_eq!(pooled[8], "inf");
}

#[test]
fn constant_map_has_chance_auc() {
    let dir = tempfile::tempdir().unwrap();
    let root = drive(dir.path());
    let preds = dir.path().join("preds");
    for label in list_images(&root.join("test/labels")).unwrap() {
        let m = load_mask(&label).unwrap();
        let id = label.file_stem().unwrap().to_str().unwrap();
        save_gray(&preds.join(format!("{id}_prob.png")), m.height(), m.width(), &vec![0.5; m.height() * m.width()])
            .unwrap();
    }
    let out = dir.path().join("eval");
    let text = ok(&[
        "evaluate",
        "--data-root",
        s(&root),
        "--predictions",
        s(&preds),
        "--out",
        s(&out),
        "--eval-mode",
        "per-image",
    ]);
    assert!(text.contains("mode: per-image"));
    let rows = report_rows(&out.join("report.csv"));
    assert_eq!(rows.last().unwrap()[0], "mean");
    for r in &rows[1..] {
        assert_eq!(r[6].parse::<f64>().unwrap(), 0.5, "{r:?}");
    }
}

#[test]
fn missing_prediction_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let root = drive(dir.path());
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = dpn(&["evaluate", "--data-root", s(&root), "--predictions", s(&empty)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("01_test_prob.png"));
}

#[test]
fn training_and_prediction_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = drive(dir.path());
    let train = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--data-root", s(&root), "--out", s(&out), "--iters", "100", "--seed", "5"];
        args.extend(TINY);
        ok(&args);
        out
    };
    let (a, b) = (train("a"), train("b"));
    assert_eq!(fs::read(a.join("model.dpn")).unwrap(), fs::read(b.join("model.dpn")).unwrap());
    let losses = |p: &Path| -> Vec<String> {
        fs::read_to_string(p.join("train_log.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(losses(&a).len(), 101);
    assert_eq!(losses(&a), losses(&b));

    // the echoed settings reproduce the run
    let c = dir.path().join("c");
    let cfg = a.join("config.txt");
    ok(&["train", "--config", s(&cfg), "--out", s(&c), "--checkpoint", s(&c.join("model.dpn"))]);
    assert_eq!(fs::read(a.join("model.dpn")).unwrap(), fs::read(c.join("model.dpn")).unwrap());

    let images = root.join("test/images");
    let ck = a.join("model.dpn");
    let predict = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        ok(&["predict", "--checkpoint", s(&ck), "--out", s(&out), "--threads", threads, s(&images)]);
        out
    };
    let (p1, p2) = (predict("p1", "1"), predict("p2", "3"));
    for f in list_images(&p1).unwrap() {
        let name = f.file_name().unwrap();
        assert_eq!(fs::read(&f).unwrap(), fs::read(p2.join(name)).unwrap(), "{name:?}");
    }
    assert_eq!(list_images(&p1).unwrap().len(), 40);
}

#[test]
fn predict_continues_past_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = drive(dir.path());
    let ck = dir.path().join("m.dpn");
    let mut args = vec!["train", "--data-root", s(&root), "--iters", "1", "--checkpoint", s(&ck)];
    let out_dir = dir.path().join("t");
    args.extend(["--out", s(&out_dir)]);
    args.extend(TINY);
    ok(&args);
    let good = root.join("test/images/01_test.png");
    let bad = dir.path().join("missing.png");
    let out = dir.path().join("p");
    let res = dpn(&["predict", "--checkpoint", s(&ck), "--out", s(&out), s(&bad), s(&good)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("missing.png"));
    assert!(out.join("01_test_prob.png").exists());
}

#[test]
fn count_params_respects_ablations() {
    let full = ok(&["count-params"]);
    assert!(full.contains("119044"));
    let small = ok(&["count-params", "--branches", "os1", "--blocks", "1", "--no-aux"]);
    assert!(small.lines().any(|l| l.starts_with("block1")));
    assert!(!small.contains("block2"));
    let bad = dpn(&["count-params", "--branches", "os1,os4"]);
    assert!(!bad.status.success());
}
