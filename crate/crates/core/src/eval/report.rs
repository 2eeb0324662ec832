use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ErrorRow;
use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::paths::PathSample;

/// Column layout shared by model and baseline trace files.
pub const TRACE_CSV_HEADER: [&str; 6] = [
    "path",
    "grid_index",
    "time",
    "output",
    "value",
    "left_limit",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DkRow {
    pub k: usize,
    pub value: f64,
}

/// Validation jump losses of the same architecture trained with the IO
/// and the original loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossComparison {
    pub io_final_jump_loss: f64,
    pub old_final_jump_loss: f64,
    pub io_min_jump_loss: f64,
    pub old_min_jump_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Training summary; absent when a stored checkpoint is evaluated.
    pub best_epoch: Option<usize>,
    pub val_loss_min: Option<f64>,
    /// IO loss of the selected model on the test set (the validation set
    /// when there is no test set).
    pub test_loss: f64,
    pub reference: Option<String>,
    pub reference_test_loss: Option<f64>,
    pub eval_metric: Option<f64>,
    pub reference_resets: Option<usize>,
    pub dk: Vec<DkRow>,
    pub errors: Vec<ErrorRow>,
    pub comparison: Option<LossComparison>,
    pub runtime_seconds: f64,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.6e}"))
}

impl MetricsReport {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), "metrics", e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Markdown tables of the report.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "## {}\n", self.model);
        let _ = writeln!(s, "| quantity | value |\n|---|---|");
        let _ = writeln!(
            s,
            "| paths (train/val/test) | {}/{}/{} |",
            self.n_train, self.n_val, self.n_test
        );
        if let Some(e) = self.best_epoch {
            let _ = writeln!(s, "| best epoch | {e} |");
        }
        let _ = writeln!(
            s,
            "| min validation loss | {} |",
            fmt_opt(self.val_loss_min)
        );
        let _ = writeln!(s, "| test loss | {:.6e} |", self.test_loss);
        if let Some(r) = &self.reference {
            let _ = writeln!(s, "| reference | {r} |");
        }
        let _ = writeln!(
            s,
            "| reference test loss | {} |",
            fmt_opt(self.reference_test_loss)
        );
        let _ = writeln!(s, "| evaluation metric | {} |", fmt_opt(self.eval_metric));
        if let Some(n) = self.reference_resets {
            let _ = writeln!(s, "| particle weight resets | {n} |");
        }
        let _ = writeln!(s, "| runtime (s) | {:.1} |", self.runtime_seconds);
        if !self.dk.is_empty() {
            let _ = writeln!(s, "\n| k | d_k |\n|---|---|");
            for r in &self.dk {
                let _ = writeln!(s, "| {} | {:.6e} |", r.k, r.value);
            }
        }
        if !self.errors.is_empty() {
            let _ = writeln!(s, "\n| t | output | mean error | std |\n|---|---|---|---|");
            for r in &self.errors {
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.4} | {:.4} |",
                    r.time, r.output, r.mean, r.std
                );
            }
        }
        if let Some(c) = &self.comparison {
            let _ = writeln!(
                s,
                "\n| training loss | final jump loss | min jump loss |\n|---|---|---|"
            );
            let _ = writeln!(
                s,
                "| io | {:.3e} | {:.3e} |",
                c.io_final_jump_loss, c.io_min_jump_loss
            );
            let _ = writeln!(
                s,
                "| old | {:.3e} | {:.3e} |",
                c.old_final_jump_loss, c.old_min_jump_loss
            );
        }
        s
    }
}

/// Writes traces in long format, one row per path, grid point and output.
/// `ids` labels the paths (typically their index in the dataset).
pub fn write_traces_csv(
    path: impl AsRef<Path>,
    ids: &[usize],
    traces: &[&ForwardTrace],
    times: &[f64],
    names: &[&str],
) -> Result<()> {
    if ids.len() != traces.len() {
        return Err(Error::invalid("need one id per trace"));
    }
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_CSV_HEADER)?;
    for (&id, tr) in ids.iter().zip(traces) {
        if tr.g.nrows() != times.len() || tr.g.ncols() != names.len() {
            return Err(Error::invalid(
                "trace does not match the grid or output names",
            ));
        }
        for (k, &t) in times.iter().enumerate() {
            let left = tr.left_limit(k);
            for (j, name) in names.iter().enumerate() {
                w.write_record([
                    id.to_string(),
                    k.to_string(),
                    t.to_string(),
                    (*name).to_string(),
                    tr.g[[k, j]].to_string(),
                    left[j].to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct TraceRecord {
    path: usize,
    grid_index: usize,
    #[allow(dead_code)]
    time: f64,
    output: String,
    value: f64,
    left_limit: f64,
}

/// Reads a trace file written by [`write_traces_csv`] for paths `0..n` and
/// rebuilds the traces using the observation times of `samples`.
pub fn read_traces_csv(
    path: impl AsRef<Path>,
    samples: &[PathSample],
    names: &[&str],
) -> Result<Vec<ForwardTrace>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != TRACE_CSV_HEADER {
        return Err(Error::parse(
            path.display().to_string(),
            "header",
            format!("{header:?}"),
        ));
    }
    let d_v = names.len();
    let mut g: Vec<Array2<f64>> = samples
        .iter()
        .map(|s| Array2::from_elem((s.grid().len(), d_v), f64::NAN))
        .collect();
    let mut left = g.clone();
    for (line, rec) in r.deserialize::<TraceRecord>().enumerate() {
        let loc = || format!("{} line {}", path.display(), line + 2);
        let rec = rec.map_err(|e| Error::parse(loc(), "record", e))?;
        let j = names
            .iter()
            .position(|n| *n == rec.output)
            .ok_or_else(|| Error::parse(loc(), "output", &rec.output))?;
        let (Some(gp), Some(lp)) = (g.get_mut(rec.path), left.get_mut(rec.path)) else {
            return Err(Error::parse(loc(), "path", rec.path));
        };
        if rec.grid_index >= gp.nrows() {
            return Err(Error::parse(loc(), "grid_index", rec.grid_index));
        }
        gp[[rec.grid_index, j]] = rec.value;
        lp[[rec.grid_index, j]] = rec.left_limit;
    }
    samples
        .iter()
        .zip(g.into_iter().zip(left))
        .enumerate()
        .map(|(p, (s, (g, left)))| {
            if g.iter().chain(left.iter()).any(|x| x.is_nan()) {
                return Err(Error::parse(
                    path.display().to_string(),
                    "path",
                    format!("path {p} is incomplete"),
                ));
            }
            let obs = s.pattern().obs_indices().to_vec();
            Ok(ForwardTrace {
                pre: left.select(ndarray::Axis(0), &obs),
                post: g.select(ndarray::Axis(0), &obs),
                g,
                h: None,
                obs_indices: obs,
            })
        })
        .collect()
}

pub fn write_errors_csv(path: impl AsRef<Path>, rows: &[ErrorRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(["time", "output", "mean", "std"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dk_csv(path: impl AsRef<Path>, rows: &[DkRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(["k", "value"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
