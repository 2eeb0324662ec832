//! Synthetic datasets: Euler–Maruyama generators with random latent
//! parameters, observation sampling and on-disk persistence.

mod io;

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{sample_observation_pattern_with, Dims, MaskMode, PathSample, TimeGrid};

pub use io::{read_dataset, write_dataset, DATASET_FORMAT_VERSION};

/// Generative model of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", deny_unknown_fields)]
pub enum ModelSpec {
    /// `X_t = x0 + μ t + σ W_t`, `μ ~ N(a, b²)`; `U = X`, `V = μ`.
    BMDrift { x0: f64, sigma: f64, a: f64, b: f64 },
    /// Geometric Brownian motion with `μ ~ N(a, b²)`, `σ ~ U[σ_min, σ_max]`;
    /// `U = X`, `V = (μ, σ)`.
    GBMUncertain {
        x0: f64,
        a: f64,
        b: f64,
        sigma_min: f64,
        sigma_max: f64,
    },
    /// CIR process with uniform speed, mean and volatility; the mean follows
    /// `b_t = b0 (1 + sin(w t) / 2)` when `w` is set. `U = X`, `V = (a, b_t, σ)`.
    CIRUncertain {
        x0: f64,
        a_min: f64,
        a_max: f64,
        b_min: f64,
        b_max: f64,
        sigma_min: f64,
        sigma_max: f64,
        #[serde(default)]
        w: Option<f64>,
        /// Require `2 a_min b_min >= σ_max²` (Feller condition for all draws).
        #[serde(default)]
        strict_positivity: bool,
    },
    /// Signal `X` and observation `Y = αX + W` of two independent Brownian
    /// motions; `U = Y`, `V = X`.
    BMFilter { alpha: f64 },
    /// `U = W` a Brownian motion, `V = 1{W_t >= α}`.
    BMClass { alpha: f64 },
    /// Geometric Brownian motion with known parameters, observed and predicted
    /// itself: `U = V = X`.
    BlackScholes { x0: f64, mu: f64, sigma: f64 },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        let range = |name: &str, lo: f64, hi: f64| -> Result<()> {
            if lo > hi {
                Err(Error::invalid(format!(
                    "empty range for {name}: [{lo}, {hi}]"
                )))
            } else {
                Ok(())
            }
        };
        match *self {
            ModelSpec::BMDrift { x0, sigma, a, b } => {
                if !finite(&[x0, sigma, a, b]) || sigma <= 0.0 || b < 0.0 {
                    return Err(Error::invalid(
                        "BMDrift needs finite x0, a and sigma > 0, b >= 0",
                    ));
                }
            }
            ModelSpec::GBMUncertain {
                x0,
                a,
                b,
                sigma_min,
                sigma_max,
            } => {
                if !finite(&[x0, a, b, sigma_min, sigma_max]) || x0 <= 0.0 || b < 0.0 {
                    return Err(Error::invalid(
                        "GBMUncertain needs finite parameters, x0 > 0, b >= 0",
                    ));
                }
                if sigma_min <= 0.0 {
                    return Err(Error::invalid("sigma_min must be positive"));
                }
                range("sigma", sigma_min, sigma_max)?;
            }
            ModelSpec::CIRUncertain {
                x0,
                a_min,
                a_max,
                b_min,
                b_max,
                sigma_min,
                sigma_max,
                w,
                strict_positivity,
            } => {
                if !finite(&[x0, a_min, a_max, b_min, b_max, sigma_min, sigma_max])
                    || !w.is_none_or(f64::is_finite)
                {
                    return Err(Error::invalid("CIRUncertain parameters must be finite"));
                }
                if x0 < 0.0 || a_min <= 0.0 || b_min <= 0.0 || sigma_min <= 0.0 {
                    return Err(Error::invalid(
                        "CIRUncertain needs x0 >= 0 and positive lower bounds",
                    ));
                }
                range("a", a_min, a_max)?;
                range("b", b_min, b_max)?;
                range("sigma", sigma_min, sigma_max)?;
                if strict_positivity && 2.0 * a_min * b_min < sigma_max * sigma_max {
                    return Err(Error::invalid(format!(
                        "Feller condition 2 a_min b_min >= sigma_max^2 violated ({} < {})",
                        2.0 * a_min * b_min,
                        sigma_max * sigma_max
                    )));
                }
            }
            ModelSpec::BMFilter { alpha } | ModelSpec::BMClass { alpha } => {
                if !alpha.is_finite() {
                    return Err(Error::invalid("alpha must be finite"));
                }
            }
            ModelSpec::BlackScholes { x0, mu, sigma } => {
                if !finite(&[x0, mu, sigma]) || x0 <= 0.0 || sigma <= 0.0 {
                    return Err(Error::invalid("BlackScholes needs x0 > 0 and sigma > 0"));
                }
            }
        }
        Ok(())
    }

    /// Input/output dimensions (`include_squared_target` only affects
    /// `BMDrift`).
    pub fn dims(&self, include_squared_target: bool) -> Dims {
        let d_v = match self {
            ModelSpec::BMDrift { .. } => 1 + usize::from(include_squared_target),
            ModelSpec::GBMUncertain { .. } => 2,
            ModelSpec::CIRUncertain { .. } => 3,
            ModelSpec::BMFilter { .. }
            | ModelSpec::BMClass { .. }
            | ModelSpec::BlackScholes { .. } => 1,
        };
        Dims::new(1, d_v)
    }

    /// Names of the output coordinates.
    pub fn output_names(&self, include_squared_target: bool) -> Vec<&'static str> {
        match self {
            ModelSpec::BMDrift { .. } if include_squared_target => vec!["mu", "mu_sq"],
            ModelSpec::BMDrift { .. } => vec!["mu"],
            ModelSpec::GBMUncertain { .. } => vec!["mu", "sigma"],
            ModelSpec::CIRUncertain { .. } => vec!["a", "b", "sigma"],
            ModelSpec::BMFilter { .. } => vec!["x"],
            ModelSpec::BMClass { .. } => vec!["indicator"],
            ModelSpec::BlackScholes { .. } => vec!["x"],
        }
    }

    /// Parameter-filtering models: the output is a latent parameter that is
    /// never observed at `t0`.
    pub fn is_parameter_filtering(&self) -> bool {
        matches!(
            self,
            ModelSpec::BMDrift { .. }
                | ModelSpec::GBMUncertain { .. }
                | ModelSpec::CIRUncertain { .. }
        )
    }
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_val_fraction() -> f64 {
    0.2
}

/// Dataset size, grid and observation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    /// Paths in the combined train + validation set.
    pub n_paths: usize,
    #[serde(default = "GenerationConfig::default_horizon")]
    pub horizon: f64,
    #[serde(default = "GenerationConfig::default_steps")]
    pub n_steps: usize,
    #[serde(default = "GenerationConfig::default_p")]
    pub obs_probability: f64,
    #[serde(default)]
    pub mask_mode: MaskMode,
    pub seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub test_size: usize,
    /// Append `μ²` as an extra output coordinate (`BMDrift` only).
    #[serde(default)]
    pub include_squared_target: bool,
    /// Standard deviation of i.i.d. Gaussian noise added to observed outputs.
    #[serde(default)]
    pub obs_noise_std: Option<f64>,
}

impl GenerationConfig {
    fn default_horizon() -> f64 {
        1.0
    }
    fn default_steps() -> usize {
        100
    }
    fn default_p() -> f64 {
        0.1
    }

    /// Defaults used throughout the experiments: `T = 1`, `dt = 0.01`,
    /// `p = 0.1`, 80/20 split.
    pub fn new(n_paths: usize, test_size: usize, seed: u64) -> Self {
        Self {
            n_paths,
            horizon: 1.0,
            n_steps: 100,
            obs_probability: 0.1,
            mask_mode: MaskMode::Full,
            seed,
            train_fraction: 0.8,
            val_fraction: 0.2,
            test_size,
            include_squared_target: false,
            obs_noise_std: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::invalid("n_paths must be at least 1"));
        }
        if !(self.obs_probability > 0.0 && self.obs_probability <= 1.0) {
            return Err(Error::invalid("obs_probability must lie in (0, 1]"));
        }
        if self.train_fraction < 0.0
            || self.val_fraction < 0.0
            || (self.train_fraction + self.val_fraction - 1.0).abs() > 1e-9
        {
            return Err(Error::invalid(
                "train/val fractions must be nonnegative and sum to 1",
            ));
        }
        if self
            .obs_noise_std
            .is_some_and(|s| !(s >= 0.0 && s.is_finite()))
        {
            return Err(Error::invalid("obs_noise_std must be a nonnegative number"));
        }
        TimeGrid::uniform(self.horizon, self.n_steps)?;
        Ok(())
    }

    /// Number of training paths; validation gets the rest of `n_paths`.
    pub fn n_train(&self) -> usize {
        ((self.n_paths as f64) * self.train_fraction).round() as usize
    }

    pub fn count(&self, role: Role) -> usize {
        match role {
            Role::Train => self.n_train(),
            Role::Val => self.n_paths - self.n_train(),
            Role::Test => self.test_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    fn stream_salt(self) -> u64 {
        match self {
            Role::Train => 0x5452_4149_4e00_0001,
            Role::Val => 0x5641_4c00_0000_0002,
            Role::Test => 0x5445_5354_0000_0003,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: ModelSpec,
    pub config: GenerationConfig,
    pub role: Role,
    pub samples: Vec<PathSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> Dims {
        self.spec.dims(self.config.include_squared_target)
    }

    pub fn grid(&self) -> Option<&TimeGrid> {
        self.samples.first().map(|s| s.grid())
    }
}

/// Independent RNG for path `index` of the given split.
pub fn path_rng(seed: u64, role: Role, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ role.stream_salt());
    rng.set_stream(index as u64);
    rng
}

/// Generates the train, validation and test splits.
pub fn generate(
    spec: &ModelSpec,
    config: &GenerationConfig,
) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    config.validate()?;
    let grid = Arc::new(TimeGrid::uniform(config.horizon, config.n_steps)?);
    let make = |role| -> Result<Dataset> {
        let samples = (0..config.count(role))
            .into_par_iter()
            .map(|i| {
                let mut rng = path_rng(config.seed, role, i);
                simulate_path(spec, config, &grid, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            spec: *spec,
            config: config.clone(),
            role,
            samples,
        })
    };
    Ok((make(Role::Train)?, make(Role::Val)?, make(Role::Test)?))
}

/// One Euler step of the CIR process with full truncation at zero.
pub fn cir_euler_step(x: f64, a: f64, b_t: f64, sigma: f64, dt: f64, dw: f64) -> f64 {
    (x + a * (b_t - x) * dt + sigma * x.max(0.0).sqrt() * dw).max(0.0)
}

/// Time-dependent CIR mean `b_t = b0 (1 + sin(w t) / 2)`.
pub fn cir_mean(b0: f64, w: Option<f64>, t: f64) -> f64 {
    match w {
        Some(w) => b0 * (1.0 + (w * t).sin() / 2.0),
        None => b0,
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> Result<f64> {
    if sd == 0.0 {
        return Ok(mean);
    }
    let dist = Normal::new(mean, sd).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// Simulates one path of `spec` on `grid` with its observation pattern.
pub fn simulate_path<R: Rng + ?Sized>(
    spec: &ModelSpec,
    config: &GenerationConfig,
    grid: &Arc<TimeGrid>,
    rng: &mut R,
) -> Result<PathSample> {
    let n = grid.len();
    let times = grid.times();
    let dims = spec.dims(config.include_squared_target);
    let mut u = Array2::zeros((n, dims.d_u));
    let mut v = Array2::zeros((n, dims.d_v));
    let mut latent = BTreeMap::new();
    let mut z = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };

    match *spec {
        ModelSpec::BMDrift { x0, sigma, a, b } => {
            let mu = normal(rng, a, b)?;
            latent.insert("mu".into(), mu);
            let mut x = x0;
            u[[0, 0]] = x;
            for k in 1..n {
                let dt = times[k] - times[k - 1];
                x += mu * dt + sigma * dt.sqrt() * z(rng);
                u[[k, 0]] = x;
            }
            v.column_mut(0).fill(mu);
            if config.include_squared_target {
                v.column_mut(1).fill(mu * mu);
            }
        }
        ModelSpec::GBMUncertain {
            x0,
            a,
            b,
            sigma_min,
            sigma_max,
        } => {
            let mu = normal(rng, a, b)?;
            let sigma = uniform(rng, sigma_min, sigma_max);
            latent.insert("mu".into(), mu);
            latent.insert("sigma".into(), sigma);
            simulate_gbm(&mut u, times, x0, mu, sigma, &mut z, rng);
            v.column_mut(0).fill(mu);
            v.column_mut(1).fill(sigma);
        }
        ModelSpec::CIRUncertain {
            x0,
            a_min,
            a_max,
            b_min,
            b_max,
            sigma_min,
            sigma_max,
            w,
            ..
        } => {
            let a = uniform(rng, a_min, a_max);
            let b0 = uniform(rng, b_min, b_max);
            let sigma = uniform(rng, sigma_min, sigma_max);
            latent.insert("a".into(), a);
            latent.insert("b0".into(), b0);
            latent.insert("sigma".into(), sigma);
            let mut x = x0;
            u[[0, 0]] = x;
            for k in 1..n {
                let dt = times[k] - times[k - 1];
                let dw = dt.sqrt() * z(rng);
                x = cir_euler_step(x, a, cir_mean(b0, w, times[k - 1]), sigma, dt, dw);
                u[[k, 0]] = x;
            }
            for k in 0..n {
                v[[k, 0]] = a;
                v[[k, 1]] = cir_mean(b0, w, times[k]);
                v[[k, 2]] = sigma;
            }
        }
        ModelSpec::BMFilter { alpha } => {
            let (mut x, mut w) = (0.0, 0.0);
            for k in 1..n {
                let sd = (times[k] - times[k - 1]).sqrt();
                x += sd * z(rng);
                w += sd * z(rng);
                u[[k, 0]] = alpha * x + w;
                v[[k, 0]] = x;
            }
        }
        ModelSpec::BMClass { alpha } => {
            let mut w: f64 = 0.0;
            v[[0, 0]] = f64::from(u8::from(w >= alpha));
            for k in 1..n {
                w += (times[k] - times[k - 1]).sqrt() * z(rng);
                u[[k, 0]] = w;
                v[[k, 0]] = f64::from(u8::from(w >= alpha));
            }
        }
        ModelSpec::BlackScholes { x0, mu, sigma } => {
            simulate_gbm(&mut u, times, x0, mu, sigma, &mut z, rng);
            v.assign(&u);
        }
    }

    let mut pattern =
        sample_observation_pattern_with(grid, config.obs_probability, config.mask_mode, dims, rng)?;
    if spec.is_parameter_filtering() {
        pattern = pattern.without_outputs_at_start();
    }
    let mut sample = PathSample::new(grid.clone(), u, v.clone(), pattern, latent)?;
    if let Some(sd) = config.obs_noise_std {
        let noisy = v.mapv(|x| x + sd * z(rng));
        sample = sample.with_noisy_outputs(noisy)?;
    }
    Ok(sample)
}

/// Exact log-space GBM steps on the grid.
fn simulate_gbm<R: Rng + ?Sized>(
    u: &mut Array2<f64>,
    times: &[f64],
    x0: f64,
    mu: f64,
    sigma: f64,
    z: &mut impl FnMut(&mut R) -> f64,
    rng: &mut R,
) {
    let mut x = x0;
    u[[0, 0]] = x;
    for k in 1..times.len() {
        let dt = times[k] - times[k - 1];
        x *= ((mu - 0.5 * sigma * sigma) * dt + sigma * dt.sqrt() * z(rng)).exp();
        u[[k, 0]] = x;
    }
}
