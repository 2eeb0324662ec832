mod common;

use std::fs;
use std::path::Path;

use njode::baselines::{reference_traces, Reference};
use njode::eval::{
    dk_estimate, error_distribution, evaluation_metric, read_traces_csv, run_experiment,
    write_traces_csv, ExperimentConfig, MetricsReport,
};
use njode::ForwardTrace;
use proptest::prelude::*;

fn analytic(n: usize, seed: u64) -> (Vec<njode::PathSample>, Vec<ForwardTrace>) {
    let (train, _) = common::drift_data(n, seed);
    let traces = reference_traces(&common::DRIFT, &train.samples, &Reference::Analytic)
        .unwrap()
        .into_iter()
        .map(|r| r.trace)
        .collect();
    (train.samples, traces)
}

fn shifted(t: &ForwardTrace, c: f64) -> ForwardTrace {
    let mut s = t.clone();
    s.g += c;
    s.pre += c;
    s.post += c;
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn metric_ignores_path_order(seed in any::<u64>(), shift in 1usize..10, c in -0.5f64..0.5) {
        let (_, refs) = analytic(10, seed);
        let model: Vec<ForwardTrace> = refs
            .iter()
            .enumerate()
            .map(|(i, t)| shifted(t, c * i as f64 / 10.0))
            .collect();
        let a = evaluation_metric(&model, &refs).unwrap();
        let (mut m2, mut r2) = (model.clone(), refs.clone());
        m2.rotate_left(shift % refs.len());
        r2.rotate_left(shift % refs.len());
        let b = evaluation_metric(&m2, &r2).unwrap();
        prop_assert!((a - b).abs() <= 1e-15 * a.max(1.0));
        prop_assert_eq!(evaluation_metric(&refs, &refs).unwrap(), 0.0);
        prop_assert_eq!(a == 0.0, c == 0.0);
    }
}

#[test]
fn constant_offset() {
    let (samples, refs) = analytic(200, 1);
    let c = 0.125;
    let model: Vec<ForwardTrace> = refs.iter().map(|t| shifted(t, c)).collect();
    assert!((evaluation_metric(&model, &refs).unwrap() - c * c).abs() < 1e-15);
    for k in 1..=3 {
        // pre- and post-jump parts both contribute |c|
        assert!((dk_estimate(&model, &refs, k).unwrap() - 2.0 * c).abs() < 1e-12);
    }

    // errors of the target itself shifted by c
    let exact: Vec<ForwardTrace> = samples
        .iter()
        .zip(&refs)
        .map(|(s, r)| {
            let mut t = r.clone();
            t.g = s.v().clone() + c;
            t
        })
        .collect();
    let rows = error_distribution(&exact, &samples, &[0.5, 1.0], &["mu"]).unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert!((r.mean - c).abs() < 1e-12 && r.std < 1e-12, "{r:?}");
    }
}

#[test]
fn trace_csv_layout_and_round_trip() {
    let (samples, refs) = analytic(5, 2);
    let ids: Vec<usize> = (0..refs.len()).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traces.csv");
    let times = samples[0].grid().times().to_vec();
    let borrowed: Vec<&ForwardTrace> = refs.iter().collect();
    write_traces_csv(&path, &ids, &borrowed, &times, &["mu"]).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "path,grid_index,time,output,value,left_limit"
    );
    assert_eq!(text.lines().count(), 1 + ids.len() * times.len());
    let back = read_traces_csv(&path, &samples, &["mu"]).unwrap();
    assert_eq!(back, refs);
}

fn load_smoke() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json");
    ExperimentConfig::load(path).unwrap()
}

fn without_runtime(mut r: MetricsReport) -> MetricsReport {
    r.runtime_seconds = 0.0;
    r
}

/// `history.csv` without the wall-clock column.
fn history(dir: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(dir.join("history.csv")).unwrap();
    let keep: Vec<usize> = r
        .headers()
        .unwrap()
        .iter()
        .enumerate()
        .filter(|(_, h)| *h != "wall_time")
        .map(|(i, _)| i)
        .collect();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            keep.iter().map(|&i| rec[i].to_string()).collect()
        })
        .collect()
}

#[test]
fn smoke_experiment_is_complete_and_deterministic() {
    let cfg = load_smoke();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&cfg, a.path()).unwrap();
    let rb = run_experiment(&cfg, b.path()).unwrap();
    for f in [
        "config.json",
        "checkpoint.json",
        "history.csv",
        "metrics.json",
        "dk.csv",
        "errors.csv",
        "traces_model.csv",
        "traces_analytic.csv",
        "plots/path_0.svg",
    ] {
        assert!(a.path().join(f).is_file(), "missing {f}");
    }
    assert_eq!(history(a.path()).len(), 4);
    assert_eq!(history(a.path()), history(b.path()));
    for f in [
        "checkpoint.json",
        "traces_model.csv",
        "dk.csv",
        "errors.csv",
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs between runs"
        );
    }
    let saved = MetricsReport::load(a.path().join("metrics.json")).unwrap();
    assert_eq!(without_runtime(saved), without_runtime(ra.clone()));
    assert_eq!(without_runtime(ra), without_runtime(rb));
}
