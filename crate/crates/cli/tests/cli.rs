use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn anchorpo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anchorpo")).args(args).current_dir(dir).output().unwrap()
}

const SMALL: &str = "[world]\nn_prompts = 10\n[optimizer]\nmax_steps = 6\nbatch_size = 4\n[telemetry]\ncadence = 3\n";

#[test]
fn default_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = anchorpo(dir.path(), &["default-config"]);
    assert!(out.status.success());
    fs::write(dir.path().join("d.toml"), &out.stdout).unwrap();
    let again = anchorpo(dir.path(), &["train", "-c", "d.toml", "-o", "run"]);
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
    assert!(dir.path().join("run/metrics.csv").exists());
}

#[test]
fn train_eval_plotdata() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.toml"), SMALL).unwrap();
    assert!(anchorpo(dir.path(), &["train", "-c", "s.toml", "-o", "run"]).status.success());

    let eval = anchorpo(dir.path(), &["eval", "--checkpoint", "run/checkpoint.json"]);
    assert!(eval.status.success());
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["step"], 6);
    assert!(report["heldout_accuracy"].as_f64().unwrap() > 0.0);

    let plot = anchorpo(dir.path(), &["plotdata", "-m", "run/metrics.csv", "-s", "anchor"]);
    let text = String::from_utf8(plot.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,reward_w,reward_anchor,reward_l");
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.toml"), SMALL).unwrap();
    fs::write(dir.path().join("bad.toml"), "[objective]\nmethod = \"uapo\"\nbogus = 1\n").unwrap();
    fs::write(dir.path().join("nodata.toml"), "[dataset]\npath = \"missing.jsonl\"\n").unwrap();
    for args in [
        &["train", "-c", "absent.toml"][..],
        &["train", "-c", "bad.toml"],
        &["train", "-c", "nodata.toml"],
        &["compare"],
    ] {
        let out = anchorpo(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    anchorpo(dir.path(), &["train", "-c", "s.toml", "-o", "run"]);
    let out = anchorpo(dir.path(), &["plotdata", "-m", "run/metrics.csv", "-s", "loss"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_3_and_keeps_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("[optimizer]\n", "[optimizer]\nlr = 1e308\n");
    fs::write(dir.path().join("hot.toml"), cfg).unwrap();
    let out = anchorpo(dir.path(), &["train", "-c", "hot.toml", "-o", "run"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let eval = anchorpo(dir.path(), &["eval", "--checkpoint", "run/checkpoint.json"]);
    assert!(eval.status.success());
}

#[test]
fn gen_data_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.toml"), SMALL).unwrap();
    assert!(anchorpo(dir.path(), &["gen-data", "-c", "s.toml", "-o", "data.jsonl"]).status.success());
    fs::write(dir.path().join("f.toml"), format!("{SMALL}[dataset]\npath = \"data.jsonl\"\n")).unwrap();
    assert!(anchorpo(dir.path(), &["train", "-c", "s.toml", "-o", "a"]).status.success());
    assert!(anchorpo(dir.path(), &["train", "-c", "f.toml", "-o", "b"]).status.success());
    assert_eq!(fs::read(dir.path().join("a/metrics.csv")).unwrap(), fs::read(dir.path().join("b/metrics.csv")).unwrap());
}

#[test]
fn gradcheck_single_method() {
    let dir = tempfile::tempdir().unwrap();
    let out = anchorpo(dir.path(), &["gradcheck", "--instances", "5", "--method", "simuapo-multi"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 2);
}
