use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::evaluate::{assess, model_name, write_assessment, EvalOptions, ReferenceSource};
use super::report::{LossComparison, MetricsReport};
use crate::baselines::Reference;
use crate::datasets::{
    generate, read_dataset, write_dataset, Dataset, GenerationConfig, ModelSpec,
};
use crate::error::{Error, Result};
use crate::losses::LossVariant;
use crate::model::{train, Architecture, EpochRecord, NjodeParams, TrainConfig};
use crate::nn::Activation;
use crate::paths::Dims;

pub const EXPERIMENT_CONFIG_VERSION: u32 = 1;

/// Where the paths come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Generate {
        spec: ModelSpec,
        generation: GenerationConfig,
    },
    /// Directory with `train/`, `val/` and optionally `test/` written by
    /// [`write_dataset`].
    Load { dir: PathBuf },
}

fn default_hidden() -> usize {
    100
}

fn default_one() -> usize {
    1
}

fn default_level() -> usize {
    3
}

fn default_true() -> bool {
    true
}

fn default_dropout() -> f64 {
    0.1
}

fn default_gamma() -> f64 {
    100.0
}

/// [`Architecture`] without the data dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_h: usize,
    pub activation: Activation,
    #[serde(default = "default_hidden")]
    pub hidden_width: usize,
    #[serde(default = "default_one")]
    pub hidden_layers: usize,
    #[serde(default = "default_level")]
    pub sig_level: usize,
    #[serde(default = "default_true")]
    pub recurrent_encoder: bool,
    #[serde(default = "default_true")]
    pub encoder_residual: bool,
    #[serde(default = "default_true")]
    pub decoder_residual: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_gamma")]
    pub gamma_init: f64,
}

impl ModelConfig {
    pub fn new(d_h: usize, activation: Activation) -> Self {
        Self {
            d_h,
            activation,
            hidden_width: 100,
            hidden_layers: 1,
            sig_level: 3,
            recurrent_encoder: true,
            encoder_residual: true,
            decoder_residual: true,
            dropout: 0.1,
            gamma_init: 100.0,
        }
    }

    pub fn architecture(&self, dims: Dims) -> Architecture {
        Architecture {
            dims,
            d_h: self.d_h,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            activation: self.activation,
            sig_level: self.sig_level,
            recurrent_encoder: self.recurrent_encoder,
            encoder_residual: self.encoder_residual,
            decoder_residual: self.decoder_residual,
            dropout: self.dropout,
            gamma_init: self.gamma_init,
        }
    }
}

fn default_dk() -> usize {
    3
}

fn default_plots() -> usize {
    3
}

fn default_trace_paths() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub training: TrainConfig,
    /// Defaults to the closed form where one exists and a 1000-particle
    /// filter otherwise.
    #[serde(default)]
    pub reference: Option<Reference>,
    /// Seed of the parameter initialization.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dk")]
    pub dk_max: usize,
    #[serde(default)]
    pub error_times: Vec<f64>,
    #[serde(default = "default_plots")]
    pub plot_paths: usize,
    #[serde(default = "default_trace_paths")]
    pub trace_paths: usize,
    /// Also train with the original loss and compare the jump losses.
    #[serde(default)]
    pub compare_losses: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSource, model: ModelConfig, training: TrainConfig) -> Self {
        Self {
            version: EXPERIMENT_CONFIG_VERSION,
            dataset,
            model,
            training,
            reference: None,
            seed: 0,
            dk_max: 3,
            error_times: Vec::new(),
            plot_paths: 3,
            trace_paths: 20,
            compare_losses: false,
            output_dir: None,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::parse("config", "json", e))?;
        match raw.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(EXPERIMENT_CONFIG_VERSION) => {}
            Some(v) => {
                return Err(Error::UnsupportedVersion {
                    found: u32::try_from(v).unwrap_or(u32::MAX),
                    expected: EXPERIMENT_CONFIG_VERSION,
                })
            }
            None => return Err(Error::parse("config", "version", "missing")),
        }
        let cfg: Self =
            serde_json::from_value(raw).map_err(|e| Error::parse("config", "experiment", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            dk_max: self.dk_max,
            error_times: self.error_times.clone(),
            plot_paths: self.plot_paths,
            trace_paths: self.trace_paths,
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSource::Generate { spec, generation } => {
                spec.validate()?;
                generation.validate()?;
                let arch = self
                    .model
                    .architecture(spec.dims(generation.include_squared_target));
                arch.validate()?;
                arch.drift_input_width()?;
                if self
                    .error_times
                    .iter()
                    .any(|&t| !(0.0..=generation.horizon).contains(&t))
                {
                    return Err(Error::invalid("error_times must lie in the time horizon"));
                }
            }
            DatasetSource::Load { dir } => {
                if !dir.is_dir() {
                    return Err(Error::invalid(format!(
                        "dataset directory {} does not exist",
                        dir.display()
                    )));
                }
            }
        }
        self.training.validate()
    }
}

/// Input of the `generate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub version: u32,
    pub spec: ModelSpec,
    pub generation: GenerationConfig,
}

impl DatasetConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::parse("dataset config", "json", e))?;
        match raw.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(EXPERIMENT_CONFIG_VERSION) => {}
            Some(v) => {
                return Err(Error::UnsupportedVersion {
                    found: u32::try_from(v).unwrap_or(u32::MAX),
                    expected: EXPERIMENT_CONFIG_VERSION,
                })
            }
            None => return Err(Error::parse("dataset config", "version", "missing")),
        }
        let cfg: Self = serde_json::from_value(raw)
            .map_err(|e| Error::parse("dataset config", "dataset", e))?;
        cfg.spec.validate()?;
        cfg.generation.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }
}

/// The three splits of a stored dataset; the test split may be absent.
pub fn load_splits(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset, Option<Dataset>)> {
    let dir = dir.as_ref();
    let train = read_dataset(dir.join("train"))?;
    let val = read_dataset(dir.join("val"))?;
    let test = if dir.join("test").is_dir() {
        Some(read_dataset(dir.join("test"))?)
    } else {
        None
    };
    for other in std::iter::once(&val).chain(&test) {
        if other.spec != train.spec || other.grid() != train.grid() || other.dims() != train.dims()
        {
            return Err(Error::invalid(
                "dataset splits disagree on model, grid or dimensions",
            ));
        }
    }
    Ok((train, val, test.filter(|t| !t.is_empty())))
}

/// Writes the nonempty splits below `dir`.
pub fn write_splits(dir: impl AsRef<Path>, splits: [&Dataset; 3]) -> Result<()> {
    let dir = dir.as_ref();
    for ds in splits {
        if !ds.is_empty() {
            write_dataset(ds, dir.join(ds.role.name()))?;
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn comparison(io: &[EpochRecord], old: &[EpochRecord]) -> LossComparison {
    let min = |h: &[EpochRecord]| {
        h.iter()
            .map(|r| r.val_jump_loss)
            .fold(f64::INFINITY, f64::min)
    };
    LossComparison {
        io_final_jump_loss: io.last().map_or(f64::NAN, |r| r.val_jump_loss),
        old_final_jump_loss: old.last().map_or(f64::NAN, |r| r.val_jump_loss),
        io_min_jump_loss: min(io),
        old_min_jump_loss: min(old),
    }
}

fn write_comparison_csv(path: &Path, io: &[EpochRecord], old: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "io_val_loss",
        "io_val_jump_loss",
        "old_val_loss",
        "old_val_jump_loss",
    ])?;
    for (a, b) in io.iter().zip(old) {
        w.write_record([
            a.epoch.to_string(),
            a.val_loss.to_string(),
            a.val_jump_loss.to_string(),
            b.val_loss.to_string(),
            b.val_jump_loss.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Data, training, evaluation against the reference and all report files
/// in `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<MetricsReport> {
    let start = Instant::now();
    let out = out_dir.as_ref();
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e).in_stage("write"))?;
    write_text(&out.join("config.json"), &(cfg.to_json_string() + "\n"))
        .map_err(|e| e.in_stage("write"))?;

    let (train_set, val_set, test_set) = match &cfg.dataset {
        DatasetSource::Generate { spec, generation } => {
            let (tr, va, te) = generate(spec, generation).map_err(|e| e.in_stage("dataset"))?;
            (tr, va, Some(te).filter(|t| !t.is_empty()))
        }
        DatasetSource::Load { dir } => load_splits(dir).map_err(|e| e.in_stage("dataset"))?,
    };
    let spec = train_set.spec;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(
            Error::invalid("training and validation sets must be nonempty").in_stage("dataset"),
        );
    }
    let arch = cfg.model.architecture(train_set.dims());
    let params0 = NjodeParams::init(arch, cfg.seed).map_err(|e| e.in_stage("init"))?;
    log::info!(
        "training on {} paths ({} validation), {} parameters",
        train_set.len(),
        val_set.len(),
        params0.store.num_scalars()
    );
    let outcome = train(
        &params0,
        &train_set.samples,
        &val_set.samples,
        &cfg.training,
    )
    .map_err(|e| e.in_stage("train"))?;
    let compared = if cfg.compare_losses {
        let old_cfg = TrainConfig {
            loss: LossVariant::Old,
            ..cfg.training.clone()
        };
        let old = train(&params0, &train_set.samples, &val_set.samples, &old_cfg)
            .map_err(|e| e.in_stage("train"))?;
        Some(old)
    } else {
        None
    };

    let eval_set = test_set.as_ref().unwrap_or(&val_set);
    let reference = cfg
        .reference
        .unwrap_or_else(|| Reference::default_for(&spec, cfg.seed));
    let opts = cfg.eval_options();
    let a = assess(
        &outcome.best,
        eval_set,
        &ReferenceSource::Compute(reference),
        &opts,
    )?;

    let stage = |e: Error| e.in_stage("write");
    outcome
        .best
        .save(out.join("checkpoint.json"))
        .map_err(stage)?;
    outcome
        .write_history_csv(out.join("history.csv"))
        .map_err(stage)?;
    write_assessment(out, eval_set, &a, reference.name(), &opts).map_err(stage)?;
    let comparison = compared
        .as_ref()
        .map(|old| comparison(&outcome.history, &old.history));
    if let Some(old) = &compared {
        write_comparison_csv(
            &out.join("loss_comparison.csv"),
            &outcome.history,
            &old.history,
        )
        .map_err(stage)?;
    }

    let report = MetricsReport {
        model: model_name(&spec),
        n_train: train_set.len(),
        n_val: val_set.len(),
        n_test: test_set.as_ref().map_or(0, Dataset::len),
        best_epoch: Some(outcome.best_epoch),
        val_loss_min: Some(outcome.best_val_loss()),
        test_loss: a.test_loss,
        reference: Some(reference.name().to_string()),
        reference_test_loss: Some(a.reference_test_loss),
        eval_metric: Some(a.eval_metric),
        reference_resets: a.resets,
        dk: a.dk,
        errors: a.errors,
        comparison,
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    report.save(out.join("metrics.json")).map_err(stage)?;
    Ok(report)
}
