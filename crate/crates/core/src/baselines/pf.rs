//! Sequential importance sampling over static model parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::special::log_bessel_i;
use crate::datasets::{cir_mean, ModelSpec};
use crate::error::{Error, Result};

/// How transition densities enter the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityEval {
    /// Log-densities accumulated in log space.
    #[default]
    LogSpace,
    /// Densities evaluated as plain floats and multiplied into the weights;
    /// overflow or underflow zeroes a particle.
    Direct,
}

fn default_particles() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfConfig {
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    pub seed: u64,
    #[serde(default)]
    pub density: DensityEval,
}

impl PfConfig {
    pub fn new(n_particles: usize, seed: u64) -> Self {
        Self {
            n_particles,
            seed,
            density: DensityEval::LogSpace,
        }
    }
}

/// Weighted parameter particles. Parameter vectors are `(μ)` for
/// `BMDrift`, `(μ, σ)` for `GBMUncertain` and `(a, b0, σ)` for `CIRUncertain`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    particles: Vec<Vec<f64>>,
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    resets: usize,
}

impl ParticleSet {
    /// Equally weighted particles.
    pub fn uniform(particles: Vec<Vec<f64>>) -> Result<Self> {
        let n = particles.len();
        if n == 0 {
            return Err(Error::invalid("particle set must be nonempty"));
        }
        let d = particles[0].len();
        if particles.iter().any(|p| p.len() != d) {
            return Err(Error::invalid("particles must share their dimension"));
        }
        Ok(Self {
            particles,
            log_weights: vec![-(n as f64).ln(); n],
            weights: vec![1.0 / n as f64; n],
            resets: 0,
        })
    }

    /// Particles with the given (unnormalized, nonnegative) weights.
    pub fn weighted(particles: Vec<Vec<f64>>, weights: &[f64]) -> Result<Self> {
        let mut ps = Self::uniform(particles)?;
        if weights.len() != ps.len() || weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid(
                "weights must be finite, nonnegative and one per particle",
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("weights must not all vanish"));
        }
        ps.weights = weights.iter().map(|w| w / total).collect();
        ps.log_weights = ps.weights.iter().map(|w| w.ln()).collect();
        Ok(ps)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[Vec<f64>] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Number of times every weight vanished and the set fell back to
    /// equal weights.
    pub fn resets(&self) -> usize {
        self.resets
    }

    /// Effective sample size `1 / Σ w²`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    fn reset(&mut self) {
        let n = self.len() as f64;
        self.weights.fill(1.0 / n);
        self.log_weights.fill(-n.ln());
        self.resets += 1;
    }
}

/// Draws particles from the parameter prior of `spec`.
pub fn pf_init(spec: &ModelSpec, n_particles: usize, seed: u64) -> Result<ParticleSet> {
    spec.validate()?;
    if n_particles == 0 {
        return Err(Error::invalid("need at least one particle"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |m: f64, s: f64| Normal::new(m, s).map_err(|e| Error::invalid(e.to_string()));
    let unif = |lo: f64, hi: f64| {
        Uniform::new_inclusive(lo, hi).map_err(|e| Error::invalid(e.to_string()))
    };
    let particles = match *spec {
        ModelSpec::BMDrift { a, b, .. } => {
            let m = normal(a, b)?;
            (0..n_particles).map(|_| vec![m.sample(&mut rng)]).collect()
        }
        ModelSpec::GBMUncertain {
            a,
            b,
            sigma_min,
            sigma_max,
            ..
        } => {
            let (m, s) = (normal(a, b)?, unif(sigma_min, sigma_max)?);
            (0..n_particles)
                .map(|_| {
                    let mu = m.sample(&mut rng);
                    vec![mu, s.sample(&mut rng)]
                })
                .collect()
        }
        ModelSpec::CIRUncertain {
            a_min,
            a_max,
            b_min,
            b_max,
            sigma_min,
            sigma_max,
            ..
        } => {
            let (ua, ub, us) = (
                unif(a_min, a_max)?,
                unif(b_min, b_max)?,
                unif(sigma_min, sigma_max)?,
            );
            (0..n_particles)
                .map(|_| {
                    let a = ua.sample(&mut rng);
                    let b = ub.sample(&mut rng);
                    vec![a, b, us.sample(&mut rng)]
                })
                .collect()
        }
        _ => {
            return Err(Error::invalid(
                "particle filter needs a BMDrift, GBM or CIR model",
            ))
        }
    };
    ParticleSet::uniform(particles)
}

/// Consecutive observations `x_prev` at `t_prev` and `x` at `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub t_prev: f64,
    pub x_prev: f64,
    pub t: f64,
    pub x: f64,
}

fn gaussian_log_density(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean) * (x - mean) / var)
}

/// CIR transition density in the noncentral chi-square form.
fn cir_density(a: f64, b: f64, sigma: f64, tr: &Transition, mode: DensityEval) -> f64 {
    let dt = tr.t - tr.t_prev;
    let e = (-a * dt).exp();
    let c = 2.0 * a / ((1.0 - e) * sigma * sigma);
    let q = 2.0 * a * b / (sigma * sigma) - 1.0;
    let u = c * tr.x_prev * e;
    let v = c * tr.x;
    let z = 2.0 * (u * v).sqrt();
    match mode {
        DensityEval::LogSpace => c.ln() - u - v + 0.5 * q * (v / u).ln() + log_bessel_i(q, z),
        DensityEval::Direct => {
            c * (-u - v).exp() * (v / u).powf(0.5 * q) * log_bessel_i(q, z).exp()
        }
    }
}

/// Log transition density (or the plain density for [`DensityEval::Direct`])
/// of one particle.
fn transition_density(spec: &ModelSpec, theta: &[f64], tr: &Transition, mode: DensityEval) -> f64 {
    let dt = tr.t - tr.t_prev;
    let log_p = match *spec {
        ModelSpec::BMDrift { sigma, .. } => {
            gaussian_log_density(tr.x, tr.x_prev + theta[0] * dt, sigma * sigma * dt)
        }
        ModelSpec::GBMUncertain { .. } => {
            let (mu, sigma) = (theta[0], theta[1]);
            if tr.x <= 0.0 || tr.x_prev <= 0.0 {
                f64::NEG_INFINITY
            } else {
                let r = (tr.x / tr.x_prev).ln();
                gaussian_log_density(r, (mu - 0.5 * sigma * sigma) * dt, sigma * sigma * dt)
                    - tr.x.ln()
            }
        }
        ModelSpec::CIRUncertain { w, .. } => {
            let b = cir_mean(theta[1], w, tr.t_prev);
            return cir_density(theta[0], b, theta[2], tr, mode);
        }
        _ => f64::NAN,
    };
    match mode {
        DensityEval::LogSpace => log_p,
        DensityEval::Direct => log_p.exp(),
    }
}

/// Correction step for one new observation, see [`ParticleSet::update`].
pub fn pf_update(
    mut ps: ParticleSet,
    spec: &ModelSpec,
    tr: &Transition,
    mode: DensityEval,
) -> Result<ParticleSet> {
    ps.update(spec, tr, mode)?;
    Ok(ps)
}

impl ParticleSet {
    /// Correction step for one new observation. Non-finite densities count as
    /// zero; when every weight vanishes the set is reset to equal weights.
    pub fn update(&mut self, spec: &ModelSpec, tr: &Transition, mode: DensityEval) -> Result<()> {
        let ps = self;
        if !(tr.t > tr.t_prev) {
            return Err(Error::invalid("transition must move forward in time"));
        }
        let dens: Vec<f64> = ps
            .particles
            .par_iter()
            .with_min_len(256)
            .map(|theta| transition_density(spec, theta, tr, mode))
            .collect();
        match mode {
            DensityEval::LogSpace => {
                let lw: Vec<f64> = ps
                    .log_weights
                    .iter()
                    .zip(&dens)
                    .map(|(w, d)| {
                        if d.is_nan() || *d == f64::INFINITY {
                            f64::NEG_INFINITY
                        } else {
                            w + d
                        }
                    })
                    .collect();
                let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    ps.reset();
                    return Ok(());
                }
                let total: f64 = lw.iter().map(|l| (l - m).exp()).sum();
                let log_total = m + total.ln();
                for (j, l) in lw.into_iter().enumerate() {
                    ps.log_weights[j] = l - log_total;
                    ps.weights[j] = ps.log_weights[j].exp();
                }
            }
            DensityEval::Direct => {
                let w: Vec<f64> = ps
                    .weights
                    .iter()
                    .zip(&dens)
                    .map(|(w, d)| {
                        if d.is_finite() && *d > 0.0 {
                            w * d
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let total: f64 = w.iter().sum();
                if !(total > 0.0 && total.is_finite()) {
                    ps.reset();
                    return Ok(());
                }
                for (j, wj) in w.into_iter().enumerate() {
                    ps.weights[j] = wj / total;
                    ps.log_weights[j] = ps.weights[j].ln();
                }
            }
        }
        Ok(())
    }
}

/// Weighted mean of the particle parameters.
pub fn pf_estimate(ps: &ParticleSet) -> Vec<f64> {
    let d = ps.particles[0].len();
    let mut out = vec![0.0; d];
    for (p, w) in ps.particles.iter().zip(&ps.weights) {
        for (o, x) in out.iter_mut().zip(p) {
            *o += w * x;
        }
    }
    out
}

/// Standard error of [`pf_estimate`] per coordinate, `√(Σ w² (θ − θ̂)²)`.
pub fn pf_standard_error(ps: &ParticleSet) -> Vec<f64> {
    let mean = pf_estimate(ps);
    let mut out = vec![0.0; mean.len()];
    for (p, w) in ps.particles.iter().zip(&ps.weights) {
        for ((o, x), m) in out.iter_mut().zip(p).zip(&mean) {
            *o += w * w * (x - m) * (x - m);
        }
    }
    out.iter().map(|v| v.sqrt()).collect()
}

/// Weighted mean of `f(θ)`.
pub fn pf_expectation(ps: &ParticleSet, f: impl Fn(&[f64]) -> f64) -> f64 {
    ps.particles
        .iter()
        .zip(&ps.weights)
        .map(|(p, w)| w * f(p))
        .sum()
}
