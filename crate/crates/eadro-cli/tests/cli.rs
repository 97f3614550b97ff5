//! End-to-end runs of the `eadro` binary on a miniature configuration.

use std::path::Path;
use std::process::{Command, Output};

fn eadro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eadro"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        r#"
seed = 5

[topology]
services = 6

[window]
slots = 10
slot_secs = 1

[simulate]
request_rate = 3.0
warmup_windows = 20
fault_windows = 6
gap_windows = 2

[train]
epochs = 2
batch_size = 32
"#,
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn pipeline_subcommands_chain_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let features = dir.path().join("features");
    let runs = dir.path().join("runs");

    let out = eadro(&["simulate", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["traces.ndjson", "logs.ndjson", "kpis.ndjson", "labels.ndjson", "manifest.json"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let out = eadro(&[
        "featurize",
        "--config",
        &cfg,
        "--data",
        data.to_str().unwrap(),
        "--out",
        features.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(features.join("dataset.bin").exists());

    let out = eadro(&[
        "train",
        "--config",
        &cfg,
        "--features",
        features.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = runs.join("model-full.ckpt");
    assert!(ckpt.exists());

    let out = eadro(&[
        "evaluate",
        "--config",
        &cfg,
        "--features",
        features.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("HR@1"), "{table}");
    assert!(runs.join("reports.ndjson").exists());

    let out = eadro(&[
        "troubleshoot",
        "--config",
        &cfg,
        "--features",
        features.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--traces",
        data.join("traces.ndjson").to_str().unwrap(),
        "--logs",
        data.join("logs.ndjson").to_str().unwrap(),
        "--kpis",
        data.join("kpis.ndjson").to_str().unwrap(),
        "--window-start-us",
        "30000000",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let verdict = String::from_utf8_lossy(&out.stdout);
    assert!(
        verdict.contains("no anomaly") || verdict.contains("suspected culprits"),
        "{verdict}"
    );

    let out = eadro(&[
        "ablate",
        "--config",
        &cfg,
        "--features",
        features.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
        "--variant",
        "no-graph",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(runs.join("model-no-graph.ckpt").exists());
}

#[test]
fn usage_and_config_errors_exit_one() {
    let out = eadro(&["not-a-command"]);
    assert_eq!(out.status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "definitely_not_a_key = true\n").unwrap();
    let out = eadro(&[
        "simulate",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "unknown keys are a config error");
}

#[test]
fn missing_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = eadro(&[
        "featurize",
        "--data",
        dir.path().join("nope").to_str().unwrap(),
        "--out",
        dir.path().join("f").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_flag_changes_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    for (out, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        let res = eadro(&[
            "simulate",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(res.status.success());
    }
    let read = |p: &Path| std::fs::read(p.join("traces.ndjson")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}
