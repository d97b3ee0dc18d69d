use std::path::Path;
use std::process::{Command, Output};

fn steerlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steerlab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn data_train_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.toml"), "seed = 5\n[data]\nn_episodes = 20\n[train]\nbatch_size = 8\n").unwrap();

    ok(&steerlab(d, &["gen-data", "--config", "small.toml", "--out", "data"]));
    assert_eq!(std::fs::read_to_string(d.join("data/dataset.jsonl")).unwrap().lines().count(), 20);

    ok(&steerlab(
        d,
        &["train", "--config", "small.toml", "--data", "data/dataset.jsonl", "--mode", "mcsi", "--train-steps", "15", "--out", "run"],
    ));
    let curve = std::fs::read_to_string(d.join("run/curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 16);
    assert!(curve.starts_with("step,loss,lr,mode\n"));

    let eval = ["eval", "--checkpoint", "run/checkpoint.json", "--suite", "origin,m4", "--episodes", "3", "--gamma", "1.5"];
    ok(&steerlab(d, &[&eval[..], &["--out", "e1"]].concat()));
    ok(&steerlab(d, &[&eval[..], &["--out", "e2", "--name", "other"]].concat()));
    let first = std::fs::read_to_string(d.join("e1/report.csv")).unwrap();
    assert!(first.lines().skip(1).all(|l| l.starts_with("mcsi,")), "{first}");
    assert!(d.join("e1/summary.json").exists());
    assert!(d.join("e1/mcsi_gamma.svg").exists());

    ok(&steerlab(d, &["report", "e1/report.csv", "e2/report.csv", "--out", "merged"]));
    let merged = std::fs::read_to_string(d.join("merged/report.csv")).unwrap();
    assert_eq!(merged.lines().count(), 5);
    assert!(d.join("merged/other_steps.svg").exists());

    ok(&steerlab(d, &["consistency", "--config", "small.toml", "--checkpoint", "run/checkpoint.json", "--out", "c"]));
    let js: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("c/consistency.json")).unwrap()).unwrap();
    assert!(js["js_divergence"].as_f64().unwrap() >= 0.0);
}

#[test]
fn oracle_command_passes_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = steerlab(dir.path(), &["oracle", "--instances", "50", "--out", "o"]);
    ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/oracle.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn bad_input_exits_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("typo.toml"), "[train]\nmodee = \"mle\"\n").unwrap();
    for args in [
        &["gen-data", "--config", "typo.toml"][..],
        &["eval", "--checkpoint", "missing.json"],
        &["eval", "--checkpoint", "missing.json", "--gamma", "1,2"],
        &["gen-data", "--suite", "origin,bogus"],
    ] {
        let out = steerlab(d, args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "), "{args:?}");
    }
}
