use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ambienc(root: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ambienc"))
        .arg("--root")
        .arg(root)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

#[test]
fn selftest_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = ambienc(dir.path(), &["selftest"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ambienc(dir.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(ambienc(dir.path(), &["train", "--bogus"]).status.code(), Some(2));
    // no dataset yet
    assert_eq!(ambienc(dir.path(), &["train", "--steps", "1"]).status.code(), Some(2));
    assert_eq!(
        ambienc(dir.path(), &["eval", "--checkpoint", "missing.bin"]).status.code(),
        Some(2)
    );
    assert_eq!(ambienc(dir.path(), &["gradcheck", "--op", "nope"]).status.code(), Some(2));
    fs::write(dir.path().join("bad.toml"), "[train]\nstepz = 1\n").unwrap();
    let bad = dir.path().join("bad.toml");
    assert_eq!(
        ambienc(dir.path(), &["--config", bad.to_str().unwrap(), "selftest"]).status.code(),
        Some(2)
    );
}

#[test]
fn gradcheck_single_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = ambienc(dir.path(), &["gradcheck", "--op", "channel_norm"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 1);
}

#[test]
fn gen_data_twice_gives_identical_manifests() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = ambienc(d.path(), &["gen-data", "--profile", "desk", "--seed", "7"]);
        assert!(out.status.success());
    }
    let ma = fs::read(a.path().join("data/manifest.json")).unwrap();
    let mb = fs::read(b.path().join("data/manifest.json")).unwrap();
    assert!(ma == mb, "manifests differ");
    let echoed = fs::read_to_string(a.path().join("data/run_config.toml")).unwrap();
    assert!(echoed.contains("seed = 7"));
}

#[test]
fn end_to_end_eval_writes_both_methods() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert!(ambienc(root, &["--seed", "3", "gen-data"]).status.success());
    assert!(ambienc(root, &["--seed", "3", "design-baseline", "--split", "eval"]).status.success());
    let summary = fs::read_to_string(root.join("baseline/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 8);
    assert!(ambienc(root, &["--seed", "3", "train", "--steps", "2", "--batch", "2", "--out", "C"]).status.success());
    assert_eq!(fs::read_to_string(root.join("C/loss.csv")).unwrap().lines().count(), 3);
    fs::write(root.join("eval.toml"), "[eval]\nmax_examples = 4\n").unwrap();
    let out = ambienc(
        root,
        &[
            "--seed",
            "3",
            "--config",
            root.join("eval.toml").to_str().unwrap(),
            "eval",
            "--profile",
            "desk",
            "--checkpoint",
            "C/checkpoint.bin",
            "--out",
            "R",
            "--plot",
        ],
    );
    assert!(out.status.success());
    let r = root.join("R");
    let curves = fs::read_to_string(r.join("curves.csv")).unwrap();
    let header = curves.lines().next().unwrap();
    assert!(header.starts_with("bin_hz,"));
    assert!(header.contains("ls_baseline_dry_coherence") && header.contains("neural_dry_coherence"));
    assert_eq!(curves.lines().count(), 1 + 513);
    let agg = fs::read_to_string(r.join("aggregate.csv")).unwrap();
    for metric in ["si_snr", "coherence", "magnitude_error"] {
        for method in ["ls_baseline", "neural"] {
            assert!(agg.contains(&format!("{metric},{method},")), "{agg}");
        }
    }
    assert_eq!(fs::read_to_string(r.join("examples.csv")).unwrap().lines().count(), 1 + 8);
    assert!(r.join("run_config.toml").exists());
    assert!(fs::read_to_string(r.join("coherence.svg")).unwrap().contains("<polyline"));
}
