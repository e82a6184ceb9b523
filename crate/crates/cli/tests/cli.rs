use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn stadb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stadb")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    assert_eq!(text.trim().lines().count(), 1, "one-line reason: {text}");
    serde_json::from_str(text.trim()).expect("machine-parsable stderr")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "height = 16\nwidth = 8\nchannels = 4,8\nstrides = 2,2\nglobal_hidden = 8\n\
global_dim = 6\nattention_dim = 6\ndrop_dim = 6\nspatial_kernel = 3\nreduction = 4\n\
p = 3\nn_per = 2\nepochs = 2\niters_per_epoch = 2\ncheckpoint_interval = 1\n";

#[test]
fn synth_train_eval_visualize() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let out = stadb(&["synth", "--out", p(&data), "--ids", "4", "--per-id", "4", "--height", "16", "--width", "8"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("train/0000_c1_00.ppm").is_file());

    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let out = stadb(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("checkpoint_0001.stdb").is_file());
    assert!(run.join("checkpoint_0002.stdb").is_file());
    let log = std::fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }

    let ckpt = run.join("checkpoint_0002.stdb");
    let out = stadb(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--query",
        p(&data.join("query")),
        "--gallery",
        p(&data.join("gallery")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    for key in ["mAP", "rank1", "rank5", "rank10"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }

    let vis = dir.path().join("vis");
    let out = stadb(&["visualize", "--checkpoint", p(&ckpt), "--images", p(&data.join("query")), "--out", p(&vis)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let heat = std::fs::read(vis.join("0000_c1_02_attention.ppm")).unwrap();
    assert!(heat.starts_with(b"P6\n8 16\n255\n"));
    assert!(vis.join("0000_c1_02_mask.ppm").is_file());
    assert!(vis.join("0000_c1_02_overlay.ppm").is_file());
}

#[test]
fn usage_errors_exit_one() {
    let out = stadb(&[]);
    assert_eq!(code(&out), 1);
    assert_eq!(stderr_json(&out)["error"], "usage");
    let out = stadb(&["train", "--bogus"]);
    assert_eq!(code(&out), 1);
    stderr_json(&out);
    let out = stadb(&["--help"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "alpha = 0.8\nrho = 1.5\n").unwrap();
    let out = stadb(&["train", "--config", p(&cfg), "--data", p(dir.path()), "--out", p(&dir.path().join("r"))]);
    assert_eq!(code(&out), 2);
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("line 2"));
    let out = stadb(&["train", "--config", p(&dir.path().join("missing.cfg")), "--data", ".", "--out", "r"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn data_and_checkpoint_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("0001_c1_00.ppm"), b"P5\n1 1\n255\n\0").unwrap();
    let out = stadb(&["train", "--data", p(dir.path()), "--out", p(&dir.path().join("r"))]);
    assert_eq!(code(&out), 3);
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("0001_c1_00.ppm"));

    let bogus = dir.path().join("x.stdb");
    std::fs::write(&bogus, b"NOPE0000000000000000").unwrap();
    let out = stadb(&["eval", "--checkpoint", p(&bogus), "--query", ".", "--gallery", "."]);
    assert_eq!(code(&out), 3);
    assert_eq!(stderr_json(&out)["error"], "checkpoint");
}

#[test]
fn gradcheck_passes_on_default_model() {
    let out = stadb(&["gradcheck", "--instances", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    assert!(v["max_relative_error"].as_f64().unwrap() < 1e-4);
}
