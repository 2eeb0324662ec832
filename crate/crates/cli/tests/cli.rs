use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn njode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_njode"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("NJODE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_json(path: &Path, value: &serde_json::Value) {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn drift_spec() -> serde_json::Value {
    json!({"model": "BMDrift", "x0": 0.0, "sigma": 0.2, "a": 0.05, "b": 0.1})
}

fn experiment(dir: &Path) -> serde_json::Value {
    json!({
        "version": 1,
        "dataset": {"load": {"dir": p(&dir.join("data"))}},
        "model": {"d_h": 10, "activation": "tanh", "hidden_width": 10},
        "training": {"epochs": 2, "batch_size": 40, "seed": 5},
        "seed": 6,
        "plot_paths": 1
    })
}

fn generate(dir: &Path) {
    let spec = dir.join("dataset.json");
    write_json(
        &spec,
        &json!({
            "version": 1,
            "spec": drift_spec(),
            "generation": {"n_paths": 100, "seed": 1, "test_size": 30}
        }),
    );
    let out = njode(&[
        "generate",
        "--spec",
        p(&spec),
        "--out",
        p(&dir.join("data")),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for split in ["train", "val", "test"] {
        assert!(dir.join("data").join(split).join("meta.json").is_file());
    }
}

#[test]
fn pipeline_through_stored_reference() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    let cfg = dir.join("experiment.json");
    write_json(&cfg, &experiment(dir));
    let run = dir.join("run");
    let out = njode(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("evaluation metric"));
    for f in [
        "checkpoint.json",
        "metrics.json",
        "traces_model.csv",
        "plots/path_0.svg",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }

    let base = dir.join("base");
    let out = njode(&[
        "baseline",
        "--data",
        p(&dir.join("data")),
        "--reference",
        "kalman",
        "--out",
        p(&base),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let ev = dir.join("eval");
    let out = njode(&[
        "evaluate",
        "--model",
        p(&run.join("checkpoint.json")),
        "--data",
        p(&dir.join("data")),
        "--reference",
        "stored",
        "--traces",
        p(&base.join("traces_kalman.csv")),
        "--out",
        p(&ev),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stored: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();

    let ev2 = dir.join("eval_analytic");
    let out = njode(&[
        "evaluate",
        "--model",
        p(&run.join("checkpoint.json")),
        "--data",
        p(&dir.join("data")),
        "--reference",
        "analytic",
        "--out",
        p(&ev2),
    ]);
    assert!(out.status.success());
    let analytic: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ev2.join("metrics.json")).unwrap()).unwrap();
    // Kalman and the exact posterior agree, so both references score alike.
    let a = analytic["eval_metric"].as_f64().unwrap();
    let s = stored["eval_metric"].as_f64().unwrap();
    assert!((a - s).abs() <= 1e-9 * a.max(1.0), "{a} vs {s}");
    assert_eq!(stored["test_loss"], analytic["test_loss"]);

    let out = njode(&["report", "--in", p(&ev)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("| reference | stored |"));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = dir.join("bad.json");
    let mut value = experiment(dir);
    value["version"] = json!(7);
    write_json(&cfg, &value);
    let out = njode(&["train", "--config", p(&cfg), "--out", p(&dir.join("o"))]);
    assert_eq!(out.status.code(), Some(2));

    let mut value = experiment(dir);
    value["modle"] = json!({});
    write_json(&cfg, &value);
    let out = njode(&["train", "--config", p(&cfg), "--out", p(&dir.join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("modle"));

    let out = njode(&[
        "evaluate",
        "--model",
        "m",
        "--data",
        "d",
        "--reference",
        "stored",
        "--out",
        "o",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_njode"))
        .args(["report", "--in", p(dir)])
        .env("NJODE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    let cfg = dir.join("experiment.json");
    let mut value = experiment(dir);
    value["training"]["optimizer"] = json!({
        "lr": 1e200, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.0
    });
    value["model"]["gamma_init"] = json!(1e300);
    write_json(&cfg, &value);
    let out = njode(&["train", "--config", p(&cfg), "--out", p(&dir.join("o"))]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn help_lists_subcommands() {
    let out = njode(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "generate",
        "train",
        "evaluate",
        "baseline",
        "compare-losses",
        "report",
    ] {
        assert!(text.contains(cmd), "{cmd}");
    }
}
