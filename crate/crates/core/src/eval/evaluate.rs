use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::plot::{render_svg, Panel, Series};
use super::report::{
    read_traces_csv, write_dk_csv, write_errors_csv, write_traces_csv, DkRow, MetricsReport,
};
use super::{cond_variance, dk_estimate, error_distribution, evaluation_metric, ErrorRow};
use crate::baselines::{reference_traces, Reference};
use crate::datasets::{read_dataset, Dataset, ModelSpec};
use crate::error::{Error, Result};
use crate::losses::{loss_report, LossVariant};
use crate::model::{forward_batch, ForwardTrace, NjodeParams};
use crate::paths::PathSample;

/// What is computed and written when a trained model is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub dk_max: usize,
    pub error_times: Vec<f64>,
    pub plot_paths: usize,
    pub trace_paths: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            dk_max: 3,
            error_times: Vec::new(),
            plot_paths: 3,
            trace_paths: 20,
        }
    }
}

/// Reference predictions, computed or read from a trace file written by
/// [`run_baseline`].
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceSource {
    Compute(Reference),
    Stored(PathBuf),
}

impl ReferenceSource {
    pub fn name(&self) -> &'static str {
        match self {
            ReferenceSource::Compute(r) => r.name(),
            ReferenceSource::Stored(_) => "stored",
        }
    }
}

pub(super) struct Assessment {
    pub traces: Vec<ForwardTrace>,
    pub ref_traces: Vec<ForwardTrace>,
    pub resets: Option<usize>,
    pub test_loss: f64,
    pub reference_test_loss: f64,
    pub eval_metric: f64,
    pub dk: Vec<DkRow>,
    pub errors: Vec<ErrorRow>,
}

pub(super) fn output_names(ds: &Dataset) -> Vec<&'static str> {
    ds.spec.output_names(ds.config.include_squared_target)
}

pub(super) fn model_name(spec: &ModelSpec) -> String {
    serde_json::to_value(spec)
        .ok()
        .and_then(|v| v.get("model").and_then(|m| m.as_str()).map(str::to_string))
        .unwrap_or_default()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs the model and the reference on `eval_set` and computes all metrics.
pub(super) fn assess(
    params: &NjodeParams,
    eval_set: &Dataset,
    source: &ReferenceSource,
    opts: &EvalOptions,
) -> Result<Assessment> {
    let samples = &eval_set.samples;
    let names = output_names(eval_set);
    let traces = forward_batch(params, samples, false).map_err(|e| e.in_stage("evaluate"))?;
    let test_loss = loss_report(LossVariant::Io, &traces, samples, 0.0)
        .map_err(|e| e.in_stage("evaluate"))?
        .total;

    let (ref_traces, resets) = match source {
        ReferenceSource::Compute(reference) => {
            let runs = reference_traces(&eval_set.spec, samples, reference)
                .map_err(|e| e.in_stage("reference"))?;
            let resets: usize = runs.iter().map(|r| r.resets).sum();
            let pf = matches!(reference, Reference::ParticleFilter(_));
            (
                runs.into_iter().map(|r| r.trace).collect(),
                pf.then_some(resets),
            )
        }
        ReferenceSource::Stored(path) => (
            read_traces_csv(path, samples, &names).map_err(|e| e.in_stage("reference"))?,
            None,
        ),
    };
    let reference_test_loss = loss_report(LossVariant::Io, &ref_traces, samples, 0.0)
        .map_err(|e| e.in_stage("reference"))?
        .total;
    let eval_metric =
        evaluation_metric(&traces, &ref_traces).map_err(|e| e.in_stage("evaluate"))?;
    let mut dk = Vec::new();
    for k in 1..=opts.dk_max {
        match dk_estimate(&traces, &ref_traces, k) {
            Ok(value) => dk.push(DkRow { k, value }),
            Err(Error::UndefinedMetric(_)) => break,
            Err(e) => return Err(e.in_stage("evaluate")),
        }
    }
    let errors = if opts.error_times.is_empty() {
        Vec::new()
    } else {
        error_distribution(&traces, samples, &opts.error_times, &names)
            .map_err(|e| e.in_stage("evaluate"))?
    };
    Ok(Assessment {
        traces,
        ref_traces,
        resets,
        test_loss,
        reference_test_loss,
        eval_metric,
        dk,
        errors,
    })
}

/// Writes d_k, error, trace and plot files of an assessment into `out`.
pub(super) fn write_assessment(
    out: &Path,
    eval_set: &Dataset,
    a: &Assessment,
    reference_name: &str,
    opts: &EvalOptions,
) -> Result<()> {
    let names = output_names(eval_set);
    write_dk_csv(out.join("dk.csv"), &a.dk)?;
    write_errors_csv(out.join("errors.csv"), &a.errors)?;
    let n_trace = opts.trace_paths.min(eval_set.len());
    let ids: Vec<usize> = (0..n_trace).collect();
    let times = eval_set.samples[0].grid().times();
    let model_refs: Vec<&ForwardTrace> = a.traces[..n_trace].iter().collect();
    write_traces_csv(
        out.join("traces_model.csv"),
        &ids,
        &model_refs,
        times,
        &names,
    )?;
    let ref_refs: Vec<&ForwardTrace> = a.ref_traces[..n_trace].iter().collect();
    write_traces_csv(
        out.join(format!("traces_{reference_name}.csv")),
        &ids,
        &ref_refs,
        times,
        &names,
    )?;
    if opts.plot_paths > 0 {
        let dir = out.join("plots");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let band = eval_set.config.include_squared_target
            && matches!(eval_set.spec, ModelSpec::BMDrift { .. });
        for i in 0..opts.plot_paths.min(eval_set.len()) {
            let svg = path_plot(
                &eval_set.samples[i],
                &a.traces[i],
                Some(&a.ref_traces[i]),
                &names,
                band,
            );
            write_text(&dir.join(format!("path_{i}.svg")), &svg)?;
        }
    }
    Ok(())
}

pub(super) fn path_plot(
    sample: &PathSample,
    model: &ForwardTrace,
    reference: Option<&ForwardTrace>,
    names: &[&str],
    variance_band: bool,
) -> String {
    let times = sample.grid().times();
    let pat = sample.pattern();
    let mut panels = Vec::new();
    for j in 0..sample.dims().d_u {
        let markers = pat
            .obs_indices()
            .iter()
            .enumerate()
            .filter(|(i, _)| pat.input_mask(*i)[j])
            .map(|(_, &k)| (times[k], sample.u()[[k, j]]))
            .collect();
        panels.push(Panel {
            title: format!("input U[{j}]"),
            series: vec![Series {
                label: "path".into(),
                values: sample.u().column(j).to_vec(),
                color: "#7f7f7f",
                dashed: false,
            }],
            band: None,
            markers,
        });
    }
    let var = if variance_band {
        cond_variance(model).ok()
    } else {
        None
    };
    for (j, name) in names.iter().enumerate() {
        let mut series = vec![Series {
            label: "true value".into(),
            values: sample.v().column(j).to_vec(),
            color: "#2ca02c",
            dashed: true,
        }];
        if let Some(r) = reference {
            series.push(Series {
                label: "reference".into(),
                values: r.g.column(j).to_vec(),
                color: "#1f77b4",
                dashed: false,
            });
        }
        series.push(Series {
            label: "model".into(),
            values: model.g.column(j).to_vec(),
            color: "#d62728",
            dashed: false,
        });
        let band = match (&var, j) {
            (Some(var), 0) => {
                let mean = model.g.column(0);
                let lo = mean.iter().zip(var).map(|(m, v)| m - v.sqrt()).collect();
                let hi = mean.iter().zip(var).map(|(m, v)| m + v.sqrt()).collect();
                Some((lo, hi))
            }
            _ => None,
        };
        panels.push(Panel {
            title: format!("output {name}"),
            series,
            band,
            markers: Vec::new(),
        });
    }
    render_svg(times, &panels)
}

/// The split a stored dataset is evaluated on: `test/` when present,
/// `val/` otherwise.
pub fn evaluation_split(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let test = dir.join("test");
    if test.is_dir() {
        read_dataset(test)
    } else {
        read_dataset(dir.join("val"))
    }
}

/// Evaluates a trained model on `eval_set` and writes `metrics.json` with
/// the trace, d_k, error and plot files into `out_dir`.
pub fn evaluate_model(
    params: &NjodeParams,
    eval_set: &Dataset,
    source: &ReferenceSource,
    opts: &EvalOptions,
    out_dir: impl AsRef<Path>,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let out = out_dir.as_ref();
    if eval_set.is_empty() {
        return Err(Error::invalid("evaluation set is empty").in_stage("dataset"));
    }
    if params.arch.dims != eval_set.dims() {
        return Err(
            Error::invalid("checkpoint dimensions do not match the dataset").in_stage("config"),
        );
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e).in_stage("write"))?;
    let a = assess(params, eval_set, source, opts)?;
    write_assessment(out, eval_set, &a, source.name(), opts).map_err(|e| e.in_stage("write"))?;
    let report = MetricsReport {
        model: model_name(&eval_set.spec),
        n_train: 0,
        n_val: 0,
        n_test: eval_set.len(),
        best_epoch: None,
        val_loss_min: None,
        test_loss: a.test_loss,
        reference: Some(source.name().to_string()),
        reference_test_loss: Some(a.reference_test_loss),
        eval_metric: Some(a.eval_metric),
        reference_resets: a.resets,
        dk: a.dk,
        errors: a.errors,
        comparison: None,
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    report
        .save(out.join("metrics.json"))
        .map_err(|e| e.in_stage("write"))?;
    Ok(report)
}

/// Summary of a reference run written by [`run_baseline`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub model: String,
    pub reference: Reference,
    pub n_paths: usize,
    /// IO loss of the reference predictions.
    pub loss: f64,
    pub resets: usize,
    pub paths_with_resets: usize,
    pub runtime_seconds: f64,
}

/// Runs `reference` on every path of `data` and writes
/// `traces_<name>.csv` and `baseline.json` into `out_dir`.
pub fn run_baseline(
    data: &Dataset,
    reference: &Reference,
    out_dir: impl AsRef<Path>,
) -> Result<BaselineSummary> {
    let start = Instant::now();
    let out = out_dir.as_ref();
    if data.is_empty() {
        return Err(Error::invalid("dataset is empty").in_stage("dataset"));
    }
    let runs = reference_traces(&data.spec, &data.samples, reference)
        .map_err(|e| e.in_stage("reference"))?;
    let traces: Vec<ForwardTrace> = runs.iter().map(|r| r.trace.clone()).collect();
    let loss = loss_report(LossVariant::Io, &traces, &data.samples, 0.0)
        .map_err(|e| e.in_stage("reference"))?
        .total;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e).in_stage("write"))?;
    let names = output_names(data);
    let ids: Vec<usize> = (0..data.len()).collect();
    let refs: Vec<&ForwardTrace> = traces.iter().collect();
    write_traces_csv(
        out.join(format!("traces_{}.csv", reference.name())),
        &ids,
        &refs,
        data.samples[0].grid().times(),
        &names,
    )
    .map_err(|e| e.in_stage("write"))?;
    let summary = BaselineSummary {
        model: model_name(&data.spec),
        reference: *reference,
        n_paths: data.len(),
        loss,
        resets: runs.iter().map(|r| r.resets).sum(),
        paths_with_resets: runs.iter().filter(|r| r.resets > 0).count(),
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    let path = out.join("baseline.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&path, &(text + "\n")).map_err(|e| e.in_stage("write"))?;
    Ok(summary)
}
