use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use njode::baselines::{DensityEval, PfConfig, Reference};
use njode::datasets::generate;
use njode::eval::{
    evaluate_model, evaluation_split, run_baseline, run_experiment, write_splits, DatasetConfig,
    EvalOptions, ExperimentConfig, MetricsReport, ReferenceSource,
};
use njode::{Error, NjodeParams};

#[derive(Parser)]
#[command(name = "njode", version, about = "Neural jump ODE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write its train/val/test splits.
    Generate {
        /// Dataset config (JSON with `version`, `spec`, `generation`).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment: data, training, evaluation, reports.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `output_dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against a reference on a stored dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Dataset root; the test split is used, or val without one.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        reference: RefKind,
        /// Trace file of a baseline run, for `--reference stored`.
        #[arg(long, required_if_eq("reference", "stored"))]
        traces: Option<PathBuf>,
        #[command(flatten)]
        pf: PfArgs,
        #[arg(long, default_value_t = 3)]
        dk_max: usize,
        /// Times at which signed prediction errors are tabulated.
        #[arg(long, value_delimiter = ',')]
        error_times: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        plot_paths: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a reference estimator on every path of a stored dataset.
    Baseline {
        /// Reference config (JSON), overrides `--reference`.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = RefKind::Analytic)]
        reference: RefKind,
        #[command(flatten)]
        pf: PfArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once with the IO loss and once with the original loss.
    CompareLosses {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the tables of a finished run.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RefKind {
    Analytic,
    Pf,
    Kalman,
    Financial,
    Stored,
}

#[derive(clap::Args)]
struct PfArgs {
    #[arg(long, default_value_t = 1000)]
    particles: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate transition densities as plain floats instead of in log space.
    #[arg(long)]
    direct_density: bool,
}

impl PfArgs {
    fn config(&self) -> PfConfig {
        PfConfig {
            n_particles: self.particles,
            seed: self.seed,
            density: if self.direct_density {
                DensityEval::Direct
            } else {
                DensityEval::LogSpace
            },
        }
    }
}

fn reference(kind: RefKind, pf: &PfArgs) -> Option<Reference> {
    match kind {
        RefKind::Analytic => Some(Reference::Analytic),
        RefKind::Pf => Some(Reference::ParticleFilter(pf.config())),
        RefKind::Kalman => Some(Reference::Kalman),
        RefKind::Financial => Some(Reference::Financial),
        RefKind::Stored => None,
    }
}

/// Failures of the command line itself, next to library errors.
#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Lib(#[from] Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(e) if e.is_config() => 2,
            CliError::Lib(e) if e.is_divergence() => 3,
            CliError::Lib(_) => 1,
        }
    }
}

fn output_dir(out: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    out.or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Usage("no --out given and the config has no output_dir".into()))
}

fn read_reference(path: &Path) -> Result<Reference, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: invalid reference: {e}", path.display())))
}

fn print_report(report: &MetricsReport) {
    println!("{}", report.to_markdown());
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { spec, out } => {
            let cfg = DatasetConfig::load(&spec)?;
            let (train, val, test) = generate(&cfg.spec, &cfg.generation)?;
            write_splits(&out, [&train, &val, &test])?;
            println!(
                "wrote {} train, {} val, {} test paths to {}",
                train.len(),
                val.len(),
                test.len(),
                out.display()
            );
        }
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = output_dir(out, &cfg)?;
            print_report(&run_experiment(&cfg, &out)?);
        }
        Command::CompareLosses { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.compare_losses = true;
            let out = output_dir(out, &cfg)?;
            print_report(&run_experiment(&cfg, &out)?);
        }
        Command::Evaluate {
            model,
            data,
            reference: kind,
            traces,
            pf,
            dk_max,
            error_times,
            plot_paths,
            out,
        } => {
            let params = NjodeParams::load(&model)?;
            let eval_set = evaluation_split(&data)?;
            let source = match (reference(kind, &pf), traces) {
                (Some(r), _) => ReferenceSource::Compute(r),
                (None, Some(path)) => ReferenceSource::Stored(path),
                (None, None) => return Err(CliError::Usage("--traces is required".into())),
            };
            let opts = EvalOptions {
                dk_max,
                error_times,
                plot_paths,
                ..EvalOptions::default()
            };
            print_report(&evaluate_model(&params, &eval_set, &source, &opts, &out)?);
        }
        Command::Baseline {
            spec,
            data,
            reference: kind,
            pf,
            out,
        } => {
            let reference = match spec {
                Some(path) => read_reference(&path)?,
                None => reference(kind, &pf).ok_or_else(|| {
                    CliError::Usage("a baseline cannot use a stored reference".into())
                })?,
            };
            let ds = evaluation_split(&data)?;
            let s = run_baseline(&ds, &reference, &out)?;
            println!(
                "{} on {} paths: loss {:.6e}, {} weight resets on {} paths",
                reference.name(),
                s.n_paths,
                s.loss,
                s.resets,
                s.paths_with_resets
            );
        }
        Command::Report { input } => {
            let metrics = input.join("metrics.json");
            let baseline = input.join("baseline.json");
            if metrics.is_file() {
                print_report(&MetricsReport::load(&metrics)?);
            } else if baseline.is_file() {
                let text = fs::read_to_string(&baseline)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", baseline.display())))?;
                println!("{text}");
            } else {
                return Err(CliError::Usage(format!(
                    "{} has no metrics.json or baseline.json",
                    input.display()
                )));
            }
        }
    }
    Ok(())
}

fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("NJODE_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!("NJODE_THREADS={value} is not a positive integer"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
