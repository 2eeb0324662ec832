//! Reference solutions: exact Gaussian conditioning, the Kalman filter,
//! particle filters and a moment estimator for geometric Brownian motion.

mod pf;
mod special;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{cir_mean, ModelSpec};
use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::paths::PathSample;

pub use pf::{
    pf_estimate, pf_expectation, pf_init, pf_standard_error, pf_update, DensityEval, ParticleSet,
    PfConfig, Transition,
};
pub use special::{log_bessel_i, norm_cdf, BESSEL_SERIES_MAX};

/// Diagonal jitter added when a covariance matrix fails to factorize.
pub const CHOLESKY_JITTER: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGaussian {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

impl PosteriorGaussian {
    fn scalar(mean: f64, var: f64) -> Self {
        Self {
            mean: Array1::from_elem(1, mean),
            cov: Array2::from_elem((1, 1), var),
        }
    }

    /// Variance of the first coordinate.
    pub fn variance(&self) -> f64 {
        self.cov[[0, 0]]
    }

    /// `E[x²]` of the first coordinate.
    pub fn second_moment(&self) -> f64 {
        self.cov[[0, 0]] + self.mean[0] * self.mean[0]
    }
}

/// Solves `m x = rhs` through a Cholesky factorization, retrying once with
/// diagonal jitter.
fn spd_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c.solve(rhs));
    }
    let jittered = m + DMatrix::identity(m.nrows(), m.ncols()) * CHOLESKY_JITTER;
    jittered
        .cholesky()
        .map(|c| c.solve(rhs))
        .ok_or_else(|| Error::Numerical("covariance matrix is not positive definite".into()))
}

fn check_observations(times: &[f64], values: &[f64]) -> Result<()> {
    if times.len() != values.len() {
        return Err(Error::invalid("need one value per observation time"));
    }
    if times.first().is_some_and(|&t| !(t > 0.0)) || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid(
            "observation times must be positive and strictly increasing",
        ));
    }
    if values.iter().chain(times).any(|x| !x.is_finite()) {
        return Err(Error::invalid("observations must be finite"));
    }
    Ok(())
}

/// Posterior of the drift `μ ~ N(a, b²)` of `X_t = x0 + μ t + σ W_t` given
/// `X` at `times` (all after the start at 0).
pub fn bm_drift_posterior(
    times: &[f64],
    values: &[f64],
    x0: f64,
    sigma: f64,
    a: f64,
    b: f64,
) -> Result<PosteriorGaussian> {
    check_observations(times, values)?;
    let k = times.len();
    if k == 0 {
        return Ok(PosteriorGaussian::scalar(a, b * b));
    }
    let mut cov = DMatrix::zeros(k + 1, k + 1);
    let mut prev = 0.0;
    for (i, &t) in times.iter().enumerate() {
        cov[(i, i)] = t - prev;
        prev = t;
    }
    cov[(k, k)] = b * b;
    let mut gamma = DMatrix::zeros(k + 1, k + 1);
    for i in 0..k {
        for j in 0..=i {
            gamma[(i, j)] = sigma;
        }
        gamma[(i, k)] = times[i];
    }
    gamma[(k, k)] = 1.0;
    let joint = &gamma * cov * gamma.transpose();
    let s11 = joint.view((0, 0), (k, k)).into_owned();
    let s12 = joint.view((0, k), (k, 1)).into_owned();
    let resid = DVector::from_iterator(k, times.iter().zip(values).map(|(t, x)| x - x0 - t * a));
    let rhs = DMatrix::from_fn(k, 2, |i, j| if j == 0 { resid[i] } else { s12[(i, 0)] });
    let sol = spd_solve(&s11, &rhs)?;
    let mean = a + s12.column(0).dot(&sol.column(0));
    let var = b * b - s12.column(0).dot(&sol.column(1));
    Ok(PosteriorGaussian::scalar(mean, var))
}

/// Kalman filter for the constant state `μ` with all observations of `X`
/// stacked into one update.
pub fn kalman_posterior(
    times: &[f64],
    values: &[f64],
    x0: f64,
    sigma: f64,
    prior_mean: f64,
    prior_var: f64,
) -> Result<PosteriorGaussian> {
    check_observations(times, values)?;
    let n = times.len();
    if n == 0 {
        return Ok(PosteriorGaussian::scalar(prior_mean, prior_var));
    }
    let h = DVector::from_column_slice(times);
    let r = DMatrix::from_fn(n, n, |i, j| sigma * sigma * times[i].min(times[j]));
    let s = &h * h.transpose() * prior_var + r;
    let innov = DVector::from_iterator(
        n,
        times
            .iter()
            .zip(values)
            .map(|(t, x)| x - x0 - t * prior_mean),
    );
    let rhs = DMatrix::from_fn(n, 2, |i, j| if j == 0 { innov[i] } else { h[i] });
    let sol = spd_solve(&s, &rhs)?;
    let mean = prior_mean + prior_var * h.dot(&sol.column(0));
    let var = prior_var - prior_var * prior_var * h.dot(&sol.column(1));
    Ok(PosteriorGaussian::scalar(mean, var))
}

/// Scalar Kalman filter on the independent increments of `X`, one update
/// per observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IncrementKalman {
    pub mean: f64,
    pub var: f64,
    sigma: f64,
    t_prev: f64,
    x_prev: f64,
}

impl IncrementKalman {
    pub fn new(x0: f64, sigma: f64, prior_mean: f64, prior_var: f64) -> Self {
        Self {
            mean: prior_mean,
            var: prior_var,
            sigma,
            t_prev: 0.0,
            x_prev: x0,
        }
    }

    pub fn update(&mut self, t: f64, x: f64) -> Result<()> {
        let dt = t - self.t_prev;
        if !(dt > 0.0) {
            return Err(Error::invalid(
                "observation times must be strictly increasing",
            ));
        }
        let s = dt * dt * self.var + self.sigma * self.sigma * dt;
        let gain = self.var * dt / s;
        self.mean += gain * (x - self.x_prev - dt * self.mean);
        self.var *= 1.0 - gain * dt;
        self.t_prev = t;
        self.x_prev = x;
        Ok(())
    }

    pub fn posterior(&self) -> PosteriorGaussian {
        PosteriorGaussian::scalar(self.mean, self.var)
    }
}

/// [`kalman_posterior`] computed recursively from increments.
pub fn kalman_posterior_recursive(
    times: &[f64],
    values: &[f64],
    x0: f64,
    sigma: f64,
    prior_mean: f64,
    prior_var: f64,
) -> Result<PosteriorGaussian> {
    check_observations(times, values)?;
    let mut kf = IncrementKalman::new(x0, sigma, prior_mean, prior_var);
    for (&t, &x) in times.iter().zip(values) {
        kf.update(t, x)?;
    }
    Ok(kf.posterior())
}

/// Posterior of the signal `X` at `query_time` given `Y = αX + W` at
/// `times`. The mean equals that of `X` at the last observation; the variance
/// grows by the time elapsed since.
pub fn bm_filter_posterior(
    times: &[f64],
    ys: &[f64],
    alpha: f64,
    query_time: f64,
) -> Result<PosteriorGaussian> {
    check_observations(times, ys)?;
    let k = times.len();
    let t_k = times.last().copied().unwrap_or(0.0);
    if !(query_time >= t_k) {
        return Err(Error::invalid("query time precedes the last observation"));
    }
    if k == 0 {
        return Ok(PosteriorGaussian::scalar(0.0, query_time));
    }
    let s11 = DMatrix::from_fn(k, k, |i, j| (alpha * alpha + 1.0) * times[i.min(j)]);
    let s12 = DVector::from_iterator(k, times.iter().map(|t| alpha * t));
    let rhs = DMatrix::from_fn(k, 2, |i, j| if j == 0 { ys[i] } else { s12[i] });
    let sol = spd_solve(&s11, &rhs)?;
    let mean = s12.dot(&sol.column(0));
    let var = t_k - s12.dot(&sol.column(1));
    Ok(PosteriorGaussian::scalar(mean, var + (query_time - t_k)))
}

/// `P[W_t >= α | W_τ = w]`; at `t = τ` the indicator `1{w >= α}`.
pub fn bm_class_prob(w: f64, tau: f64, t: f64, alpha: f64) -> Result<f64> {
    if t < tau {
        return Err(Error::invalid("query time precedes the last observation"));
    }
    if t == tau {
        return Ok(if w >= alpha { 1.0 } else { 0.0 });
    }
    Ok(norm_cdf((w - alpha) / (t - tau).sqrt()))
}

/// Log-return estimates `(μ̂, σ̂)` of a geometric Brownian motion from at
/// least two positive observations.
pub fn financial_estimator(times: &[f64], values: &[f64]) -> Result<(f64, f64)> {
    if times.len() != values.len() {
        return Err(Error::invalid("need one value per observation time"));
    }
    if times.len() < 2 {
        return Err(Error::InsufficientData(
            "the estimator needs two observations".into(),
        ));
    }
    if values.iter().any(|&x| !(x > 0.0)) || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid(
            "values must be positive and times strictly increasing",
        ));
    }
    let n = (times.len() - 1) as f64;
    let steps: Vec<(f64, f64)> = times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, x)| (t[1] - t[0], (x[1] / x[0]).ln()))
        .collect();
    let m = steps.iter().map(|(dt, r)| r / dt).sum::<f64>() / n;
    let s2 = steps
        .iter()
        .map(|(dt, r)| {
            let e = r / dt.sqrt() - m * dt.sqrt();
            e * e
        })
        .sum::<f64>()
        / n;
    Ok((m + s2 / 2.0, s2.sqrt()))
}

/// Which reference solution to compare against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    /// Closed-form conditional expectation (`BMDrift`, `BMFilter`, `BMClass`,
    /// `BlackScholes`).
    Analytic,
    /// Recursive Kalman filter (`BMDrift`).
    Kalman,
    /// Particle filter (`BMDrift`, `GBMUncertain`, `CIRUncertain`).
    ParticleFilter(PfConfig),
    /// Log-return estimator (`GBMUncertain`).
    Financial,
}

impl Reference {
    pub fn name(&self) -> &'static str {
        match self {
            Reference::Analytic => "analytic",
            Reference::Kalman => "kalman",
            Reference::ParticleFilter(_) => "pf",
            Reference::Financial => "financial",
        }
    }

    /// Default reference for `spec`.
    pub fn default_for(spec: &ModelSpec, seed: u64) -> Self {
        match spec {
            ModelSpec::GBMUncertain { .. } | ModelSpec::CIRUncertain { .. } => {
                Reference::ParticleFilter(PfConfig::new(1000, seed))
            }
            _ => Reference::Analytic,
        }
    }
}

/// Online estimator of the target given observations of the scalar input.
trait Filter {
    fn observe(&mut self, t: f64, x: f64) -> Result<()>;
    fn value(&self, t: f64, out: &mut [f64]) -> Result<()>;
    fn resets(&self) -> usize {
        0
    }
}

struct DriftBatch {
    x0: f64,
    sigma: f64,
    a: f64,
    b: f64,
    times: Vec<f64>,
    values: Vec<f64>,
    post: PosteriorGaussian,
}

impl Filter for DriftBatch {
    fn observe(&mut self, t: f64, x: f64) -> Result<()> {
        self.times.push(t);
        self.values.push(x);
        self.post = bm_drift_posterior(
            &self.times,
            &self.values,
            self.x0,
            self.sigma,
            self.a,
            self.b,
        )?;
        Ok(())
    }

    fn value(&self, _t: f64, out: &mut [f64]) -> Result<()> {
        drift_outputs(&self.post, out);
        Ok(())
    }
}

fn drift_outputs(post: &PosteriorGaussian, out: &mut [f64]) {
    out[0] = post.mean[0];
    if out.len() > 1 {
        out[1] = post.second_moment();
    }
}

impl Filter for IncrementKalman {
    fn observe(&mut self, t: f64, x: f64) -> Result<()> {
        self.update(t, x)
    }

    fn value(&self, _t: f64, out: &mut [f64]) -> Result<()> {
        drift_outputs(&self.posterior(), out);
        Ok(())
    }
}

struct SignalFilter {
    alpha: f64,
    times: Vec<f64>,
    ys: Vec<f64>,
    mean: f64,
}

impl Filter for SignalFilter {
    fn observe(&mut self, t: f64, y: f64) -> Result<()> {
        self.times.push(t);
        self.ys.push(y);
        self.mean = bm_filter_posterior(&self.times, &self.ys, self.alpha, t)?.mean[0];
        Ok(())
    }

    fn value(&self, _t: f64, out: &mut [f64]) -> Result<()> {
        out[0] = self.mean;
        Ok(())
    }
}

struct Classifier {
    alpha: f64,
    tau: f64,
    w: f64,
}

impl Filter for Classifier {
    fn observe(&mut self, t: f64, w: f64) -> Result<()> {
        self.tau = t;
        self.w = w;
        Ok(())
    }

    fn value(&self, t: f64, out: &mut [f64]) -> Result<()> {
        out[0] = bm_class_prob(self.w, self.tau, t, self.alpha)?;
        Ok(())
    }
}

struct KnownGbm {
    mu: f64,
    tau: f64,
    x: f64,
}

impl Filter for KnownGbm {
    fn observe(&mut self, t: f64, x: f64) -> Result<()> {
        self.tau = t;
        self.x = x;
        Ok(())
    }

    fn value(&self, t: f64, out: &mut [f64]) -> Result<()> {
        out[0] = self.x * (self.mu * (t - self.tau)).exp();
        Ok(())
    }
}

struct Particles {
    spec: ModelSpec,
    ps: ParticleSet,
    mode: DensityEval,
    t_prev: f64,
    x_prev: f64,
}

impl Filter for Particles {
    fn observe(&mut self, t: f64, x: f64) -> Result<()> {
        let tr = Transition {
            t_prev: self.t_prev,
            x_prev: self.x_prev,
            t,
            x,
        };
        self.ps.update(&self.spec, &tr, self.mode)?;
        self.t_prev = t;
        self.x_prev = x;
        Ok(())
    }

    fn value(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let est = pf_estimate(&self.ps);
        match self.spec {
            ModelSpec::BMDrift { .. } => {
                out[0] = est[0];
                if out.len() > 1 {
                    out[1] = pf_expectation(&self.ps, |p| p[0] * p[0]);
                }
            }
            ModelSpec::GBMUncertain { .. } => out.copy_from_slice(&est),
            ModelSpec::CIRUncertain { w, .. } => {
                out[0] = est[0];
                out[1] = pf_expectation(&self.ps, |p| cir_mean(p[1], w, t));
                out[2] = est[2];
            }
            _ => unreachable!("particle filter built for an unsupported model"),
        }
        Ok(())
    }

    fn resets(&self) -> usize {
        self.ps.resets()
    }
}

struct Financial {
    prior: (f64, f64),
    times: Vec<f64>,
    values: Vec<f64>,
    est: (f64, f64),
}

impl Filter for Financial {
    fn observe(&mut self, t: f64, x: f64) -> Result<()> {
        self.times.push(t);
        self.values.push(x);
        self.est = financial_estimator(&self.times, &self.values)?;
        Ok(())
    }

    fn value(&self, _t: f64, out: &mut [f64]) -> Result<()> {
        let (mu, sigma) = if self.times.len() < 2 {
            self.prior
        } else {
            self.est
        };
        out[0] = mu;
        out[1] = sigma;
        Ok(())
    }
}

fn build_filter(
    spec: &ModelSpec,
    reference: &Reference,
    x0: f64,
    stream: u64,
) -> Result<Box<dyn Filter>> {
    let unsupported =
        || Error::invalid(format!("no {} reference for this model", reference.name()));
    Ok(match (reference, *spec) {
        (Reference::Analytic, ModelSpec::BMDrift { x0, sigma, a, b }) => Box::new(DriftBatch {
            x0,
            sigma,
            a,
            b,
            times: Vec::new(),
            values: Vec::new(),
            post: PosteriorGaussian::scalar(a, b * b),
        }),
        (Reference::Kalman, ModelSpec::BMDrift { x0, sigma, a, b }) => {
            Box::new(IncrementKalman::new(x0, sigma, a, b * b))
        }
        (Reference::Analytic, ModelSpec::BMFilter { alpha }) => Box::new(SignalFilter {
            alpha,
            times: Vec::new(),
            ys: Vec::new(),
            mean: 0.0,
        }),
        (Reference::Analytic, ModelSpec::BMClass { alpha }) => Box::new(Classifier {
            alpha,
            tau: 0.0,
            w: x0,
        }),
        (Reference::Analytic, ModelSpec::BlackScholes { mu, .. }) => Box::new(KnownGbm {
            mu,
            tau: 0.0,
            x: x0,
        }),
        (
            Reference::ParticleFilter(cfg),
            ModelSpec::BMDrift { .. }
            | ModelSpec::GBMUncertain { .. }
            | ModelSpec::CIRUncertain { .. },
        ) => Box::new(Particles {
            spec: *spec,
            ps: pf_init(spec, cfg.n_particles, cfg.seed.wrapping_add(stream))?,
            mode: cfg.density,
            t_prev: 0.0,
            x_prev: x0,
        }),
        (
            Reference::Financial,
            ModelSpec::GBMUncertain {
                a,
                sigma_min,
                sigma_max,
                ..
            },
        ) => Box::new(Financial {
            prior: (a, 0.5 * (sigma_min + sigma_max)),
            times: vec![0.0],
            values: vec![x0],
            est: (a, 0.5 * (sigma_min + sigma_max)),
        }),
        _ => return Err(unsupported()),
    })
}

fn reference_outputs(spec: &ModelSpec, reference: &Reference) -> usize {
    match (spec, reference) {
        (ModelSpec::GBMUncertain { .. }, _) => 2,
        (ModelSpec::CIRUncertain { .. }, _) => 3,
        (ModelSpec::BMDrift { .. }, _) => 2,
        _ => 1,
    }
}

/// A reference trajectory on a path's grid together with the number of
/// particle-filter weight resets it needed.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRun {
    pub trace: ForwardTrace,
    pub resets: usize,
}

/// Reference prediction for `sample` laid out like a model trace: values on
/// the grid (after incorporating observations at a grid point) and the
/// left and right limits at each observation. `stream` decorrelates the
/// particle seeds of different paths.
pub fn reference_trace(
    spec: &ModelSpec,
    sample: &PathSample,
    reference: &Reference,
    stream: u64,
) -> Result<ReferenceRun> {
    let d_v = sample.dims().d_v;
    if sample.dims().d_u != 1 || d_v > reference_outputs(spec, reference) {
        return Err(Error::invalid(
            "sample dimensions do not match the reference model",
        ));
    }
    let times = sample.grid().times();
    let u = sample.u();
    let pat = sample.pattern();
    let mut filter = build_filter(spec, reference, u[[0, 0]], stream)?;
    let mut g = Array2::zeros((times.len(), d_v));
    let mut pre = Array2::zeros((pat.len(), d_v));
    let mut post = Array2::zeros((pat.len(), d_v));
    let mut buf = vec![0.0; d_v];
    for (k, &t) in times.iter().enumerate() {
        if let Some(i) = pat.position_of(k) {
            filter.value(t, &mut buf)?;
            pre.row_mut(i).assign(&Array1::from(buf.clone()));
            if i > 0 && pat.input_mask(i)[0] {
                filter.observe(t, u[[k, 0]])?;
            }
            filter.value(t, &mut buf)?;
            post.row_mut(i).assign(&Array1::from(buf.clone()));
        } else {
            filter.value(t, &mut buf)?;
        }
        g.row_mut(k).assign(&Array1::from(buf.clone()));
    }
    Ok(ReferenceRun {
        trace: ForwardTrace {
            g,
            h: None,
            obs_indices: pat.obs_indices().to_vec(),
            pre,
            post,
        },
        resets: filter.resets(),
    })
}

/// [`reference_trace`] for every sample, in parallel; path `i` uses stream `i`.
pub fn reference_traces(
    spec: &ModelSpec,
    samples: &[PathSample],
    reference: &Reference,
) -> Result<Vec<ReferenceRun>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| reference_trace(spec, s, reference, i as u64))
        .collect()
}
