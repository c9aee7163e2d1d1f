//! End-to-end checks of the `ditsr` binary: exit codes, CSV output, and the
//! train/sample/spectrum artifact flow.

use std::path::Path;
use std::process::{Command, Output};

fn ditsr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ditsr"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

#[test]
fn report_shares_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = ditsr(&["report", "--preset", "ours_adafm"], dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut share_sum = 0.0;
    let mut rows = 0;
    for line in stdout.lines().skip(1) {
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 5, "bad CSV row: {line}");
        share_sum += cols[4].parse::<f64>().unwrap();
        rows += 1;
    }
    assert_eq!(rows, 4, "ours_adafm has four stages");
    assert!((share_sum - 1.0).abs() < 1e-4, "shares sum to {share_sum}");
}

#[test]
fn unknown_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = ditsr(&["report", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = ditsr(&["report", "--preset", "no_such_preset"], dir.path());
    assert_eq!(out.status.code(), Some(2), "unknown preset is a validation error");
}

#[test]
fn gradcheck_micro_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = ditsr(&["gradcheck", "--preset", "micro"], dir.path());
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("all gradient checks passed"));
}

#[test]
fn train_sample_spectrum_artifact_flow() {
    let dir = tempfile::tempdir().unwrap();
    let small = [
        "--samples", "2", "--hr-size", "16", "--scale", "4",
    ];
    // iters 0: the checkpoint must be the untouched initialization
    let mut args = vec![
        "train", "--preset", "toy", "--iters", "0", "--seed", "11", "--out", "run",
    ];
    args.extend_from_slice(&small);
    let out = ditsr(&args, dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("run/model.ckpt");
    assert!(ckpt.exists());
    assert!(dir.path().join("run/manifest.json").exists());

    let cfg = ditsr::arch::preset("toy").unwrap();
    let fresh = ditsr::arch::Denoiser::build(&cfg, 11).unwrap();
    let stored = ditsr::checkpoint::load(&ckpt).unwrap();
    let fresh_params = fresh.named_params();
    assert_eq!(stored.len(), fresh_params.len());
    for ((name, p), (sname, _, sdata)) in fresh_params.iter().zip(&stored) {
        assert_eq!(name, sname);
        assert_eq!(&p.to_vec(), sdata, "tensor '{name}' differs from initialization");
    }

    // sampling with trajectory dump
    let mut args = vec![
        "sample", "--preset", "toy", "--checkpoint", "run/model.ckpt",
        "--dump-trajectory", "traj", "--seed", "11", "--out", "run",
    ];
    args.extend_from_slice(&small);
    let out = ditsr(&args, dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run/x0_hat.pfm").exists());
    let index: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("traj/index.json")).unwrap(),
    )
    .unwrap();
    let steps = index.as_array().unwrap();
    assert_eq!(steps.len(), 15);
    assert_eq!(steps[0]["step"], 15);
    assert!(dir.path().join("traj/step_015.pfm").exists());
    assert!(dir.path().join("traj/step_001.pfm").exists());

    // spectrum CSV
    let mut args = vec![
        "spectrum", "--preset", "toy", "--checkpoint", "run/model.ckpt",
        "--bins", "4", "--seed", "11", "--out", "run",
    ];
    args.extend_from_slice(&small);
    let out = ditsr(&args, dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("run/spectrum.csv")).unwrap();
    assert_eq!(csv.lines().count(), 16, "header plus one row per step");
    assert!(csv.starts_with("t,band0,band1,band2,band3"));
}

#[test]
fn synth_writes_readable_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let out = ditsr(
        &["synth", "--samples", "2", "--hr-size", "16", "--scale", "4", "--out", "data"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let x0 = ditsr::data::read_pfm(&dir.path().join("data/sample_000_x0.pfm")).unwrap();
    assert_eq!(x0.shape(), &[3, 16, 16]);
    // same seed, same pixels
    let out = ditsr(
        &["synth", "--samples", "2", "--hr-size", "16", "--scale", "4", "--out", "data2"],
        dir.path(),
    );
    assert!(out.status.success());
    let x0b = ditsr::data::read_pfm(&dir.path().join("data2/sample_000_x0.pfm")).unwrap();
    assert_eq!(x0.to_vec(), x0b.to_vec());
}

#[test]
fn train_is_deterministic_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    for out_dir in ["a", "b"] {
        let out = ditsr(
            &[
                "train", "--preset", "micro", "--iters", "3", "--seed", "5",
                "--samples", "2", "--hr-size", "16", "--scale", "4", "--out", out_dir,
            ],
            dir.path(),
        );
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(dir.path().join("a/model.ckpt")).unwrap();
    let b = std::fs::read(dir.path().join("b/model.ckpt")).unwrap();
    assert_eq!(a, b, "same seed must give bit-identical checkpoints");
}
