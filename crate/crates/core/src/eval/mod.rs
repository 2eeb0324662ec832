//! Metrics comparing model traces with reference solutions, experiment
//! orchestration and report files.

mod evaluate;
mod experiment;
pub mod plot;
mod report;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::paths::PathSample;

pub use evaluate::{
    evaluate_model, evaluation_split, run_baseline, BaselineSummary, EvalOptions, ReferenceSource,
};
pub use experiment::{
    load_splits, run_experiment, write_splits, DatasetConfig, DatasetSource, ExperimentConfig,
    ModelConfig, EXPERIMENT_CONFIG_VERSION,
};
pub use report::{
    read_traces_csv, write_dk_csv, write_errors_csv, write_traces_csv, DkRow, LossComparison,
    MetricsReport, TRACE_CSV_HEADER,
};

fn check_aligned(model: &[ForwardTrace], reference: &[ForwardTrace]) -> Result<()> {
    if model.len() != reference.len() {
        return Err(Error::invalid(
            "model and reference need the same number of paths",
        ));
    }
    if model.is_empty() {
        return Err(Error::invalid("no paths to compare"));
    }
    for (m, r) in model.iter().zip(reference) {
        if m.g.dim() != r.g.dim() || m.obs_indices != r.obs_indices {
            return Err(Error::invalid("model and reference traces are not aligned"));
        }
    }
    Ok(())
}

/// Mean over paths of the time average of `|G_t − V̂_t|²` over the grid.
pub fn evaluation_metric(model: &[ForwardTrace], reference: &[ForwardTrace]) -> Result<f64> {
    check_aligned(model, reference)?;
    let total: f64 = model
        .iter()
        .zip(reference)
        .map(|(m, r)| {
            let sq: f64 = (&m.g - &r.g).iter().map(|d| d * d).sum();
            sq / m.g.nrows() as f64
        })
        .sum();
    Ok(total / model.len() as f64)
}

fn l1(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Average L¹ gap between the left and right limits of two predictors at
/// the `k`-th observation, over the paths that have at least `k`
/// observations after the start.
pub fn dk_estimate(model: &[ForwardTrace], reference: &[ForwardTrace], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid(
            "k counts observations after the start and must be positive",
        ));
    }
    check_aligned(model, reference)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (m, r) in model.iter().zip(reference) {
        if m.obs_indices.len() > k {
            sum += l1(m.pre.row(k), r.pre.row(k)) + l1(m.post.row(k), r.post.row(k));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric(format!(
            "no path has {k} observations"
        )));
    }
    Ok(sum / count as f64)
}

/// Conditional variance `max(0, Ĝ[x²] − Ĝ[x]²)` on the grid from a trace
/// predicting the first two moments in its first two outputs.
pub fn cond_variance(trace: &ForwardTrace) -> Result<Array1<f64>> {
    if trace.g.ncols() < 2 {
        return Err(Error::invalid("trace must predict both moments"));
    }
    Ok(trace
        .g
        .outer_iter()
        .map(|r| (r[1] - r[0] * r[0]).max(0.0))
        .collect())
}

/// Mean and standard deviation of signed errors at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub time: f64,
    pub output: String,
    pub mean: f64,
    pub std: f64,
}

/// Signed errors `prediction − truth` of the grid predictions at
/// `eval_times` against the true target values of each sample.
pub fn error_distribution(
    traces: &[ForwardTrace],
    samples: &[PathSample],
    eval_times: &[f64],
    names: &[&str],
) -> Result<Vec<ErrorRow>> {
    if traces.len() != samples.len() || samples.is_empty() {
        return Err(Error::invalid("need one trace per sample"));
    }
    let grid = samples[0].grid();
    let d_v = samples[0].dims().d_v;
    if names.len() != d_v || traces.iter().any(|t| t.g.ncols() != d_v) {
        return Err(Error::invalid("output names do not match the traces"));
    }
    let n = samples.len() as f64;
    let mut rows = Vec::new();
    for &t in eval_times {
        let k = grid
            .index_of(t)
            .ok_or_else(|| Error::invalid(format!("evaluation time {t} is not on the grid")))?;
        for (j, name) in names.iter().enumerate() {
            let errs: Vec<f64> = traces
                .iter()
                .zip(samples)
                .map(|(tr, s)| tr.g[[k, j]] - s.v()[[k, j]])
                .collect();
            let mean = errs.iter().sum::<f64>() / n;
            let var = if errs.len() > 1 {
                errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            rows.push(ErrorRow {
                time: grid.times()[k],
                output: (*name).to_string(),
                mean,
                std: var.sqrt(),
            });
        }
    }
    Ok(rows)
}
