//! Irregularly observed input/output paths.
//!
//! A [`PathSample`] holds one realization of the joint process `Z = (U, V)` on
//! a dense simulation grid together with the random observation pattern that
//! decides which grid points (and which coordinates) the model gets to see.
//! Everything the model consumes from the input process goes through
//! [`interpolate_forward_fill`] and [`path_stats`], which only ever look at
//! observations up to a cutoff time.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance (times `T`) for grid membership tests.
pub const TIME_TOL: f64 = 1e-12;

/// Ascending simulation grid on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    horizon: f64,
    dt: f64,
}

impl TimeGrid {
    /// Equidistant grid with `n_steps` steps of size `horizon / n_steps`.
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::invalid("grid needs at least one step"));
        }
        let n = n_steps as f64;
        let times = (0..=n_steps).map(|i| horizon * (i as f64 / n)).collect();
        Ok(Self {
            times,
            horizon,
            dt: horizon / n,
        })
    }

    /// Grid from explicit times; `dt` is the nominal (maximal) step.
    pub fn from_times(times: Vec<f64>, dt: f64) -> Result<Self> {
        let Some(&last) = times.last() else {
            return Err(Error::invalid("empty time grid"));
        };
        if times[0] != 0.0 {
            return Err(Error::invalid("time grid must start at 0"));
        }
        if !(last.is_finite() && last > 0.0) {
            return Err(Error::invalid("time grid must end at a positive horizon"));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid(format!(
                "nominal step must be positive, got {dt}"
            )));
        }
        for w in times.windows(2) {
            let gap = w[1] - w[0];
            if gap <= 0.0 {
                return Err(Error::invalid("time grid must be strictly increasing"));
            }
            if gap > dt + 1e-12 {
                return Err(Error::invalid(format!(
                    "grid gap {gap} exceeds nominal step {dt}"
                )));
            }
        }
        Ok(Self {
            times,
            horizon: last,
            dt,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn tol(&self) -> f64 {
        TIME_TOL * self.horizon
    }

    /// Index of the grid point equal to `t` (within tolerance).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = self.floor_index(t)?;
        ((self.times[i] - t).abs() <= self.tol()).then_some(i)
    }

    /// Largest index with `times[i] <= t` (within tolerance); `None` if `t < 0`.
    pub fn floor_index(&self, t: f64) -> Option<usize> {
        let tol = self.tol();
        let n = self.times.partition_point(|&s| s <= t + tol);
        n.checked_sub(1)
    }
}

/// Input/output dimensions of a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_u: usize,
    pub d_v: usize,
}

impl Dims {
    pub fn new(d_u: usize, d_v: usize) -> Self {
        Self { d_u, d_v }
    }

    pub fn total(&self) -> usize {
        self.d_u + self.d_v
    }
}

/// How coordinates are masked at an observation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum MaskMode {
    /// Every coordinate is observed at every observation time.
    #[default]
    Full,
    /// Each coordinate is observed independently with probability `p_mask`.
    PerCoordinate { p_mask: f64 },
}

/// Observation times (as grid indices) and their coordinate masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPattern {
    obs_indices: Vec<usize>,
    masks: Vec<Vec<bool>>,
    dims: Dims,
}

impl ObservationPattern {
    pub fn new(obs_indices: Vec<usize>, masks: Vec<Vec<bool>>, dims: Dims) -> Result<Self> {
        if obs_indices.first() != Some(&0) {
            return Err(Error::invalid(
                "observation pattern must start at grid index 0",
            ));
        }
        if obs_indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "observation indices must be strictly increasing",
            ));
        }
        if masks.len() != obs_indices.len() {
            return Err(Error::invalid(format!(
                "{} masks for {} observations",
                masks.len(),
                obs_indices.len()
            )));
        }
        if let Some(m) = masks.iter().find(|m| m.len() != dims.total()) {
            return Err(Error::invalid(format!(
                "mask of length {} for dimension {}",
                m.len(),
                dims.total()
            )));
        }
        if !masks[0][..dims.d_u].iter().all(|&b| b) {
            return Err(Error::invalid(
                "all input coordinates must be observed at t0",
            ));
        }
        Ok(Self {
            obs_indices,
            masks,
            dims,
        })
    }

    pub fn obs_indices(&self) -> &[usize] {
        &self.obs_indices
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Number of observations including `t0`.
    pub fn len(&self) -> usize {
        self.obs_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs_indices.is_empty()
    }

    pub fn mask(&self, i: usize) -> &[bool] {
        &self.masks[i]
    }

    pub fn input_mask(&self, i: usize) -> &[bool] {
        &self.masks[i][..self.dims.d_u]
    }

    pub fn output_mask(&self, i: usize) -> &[bool] {
        &self.masks[i][self.dims.d_u..]
    }

    /// Observation number at grid index `k`, if `k` is an observation.
    pub fn position_of(&self, grid_index: usize) -> Option<usize> {
        self.obs_indices.binary_search(&grid_index).ok()
    }

    /// Keeps only observations with grid index `<= last_index`.
    pub fn truncated(&self, last_index: usize) -> Self {
        let n = self.obs_indices.partition_point(|&k| k <= last_index);
        Self {
            obs_indices: self.obs_indices[..n].to_vec(),
            masks: self.masks[..n].to_vec(),
            dims: self.dims,
        }
    }

    /// Clears the output part of the mask at `t0`.
    pub fn without_outputs_at_start(mut self) -> Self {
        for b in &mut self.masks[0][self.dims.d_u..] {
            *b = false;
        }
        self
    }
}

/// Draws an observation pattern: each grid index `i >= 1` is observed
/// independently with probability `p`; index 0 is always observed with a full
/// input mask.
pub fn sample_observation_pattern(
    grid: &TimeGrid,
    p: f64,
    mode: MaskMode,
    dims: Dims,
    seed: u64,
) -> Result<ObservationPattern> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_observation_pattern_with(grid, p, mode, dims, &mut rng)
}

/// Same as [`sample_observation_pattern`] with an explicit RNG.
pub fn sample_observation_pattern_with<R: Rng + ?Sized>(
    grid: &TimeGrid,
    p: f64,
    mode: MaskMode,
    dims: Dims,
    rng: &mut R,
) -> Result<ObservationPattern> {
    if grid.is_empty() {
        return Err(Error::invalid("empty time grid"));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!(
            "observation probability {p} not in (0, 1]"
        )));
    }
    if let MaskMode::PerCoordinate { p_mask } = mode {
        if !(p_mask > 0.0 && p_mask <= 1.0) {
            return Err(Error::invalid(format!(
                "mask probability {p_mask} not in (0, 1]"
            )));
        }
    }
    let d = dims.total();
    let draw_mask = |rng: &mut R| -> Vec<bool> {
        match mode {
            MaskMode::Full => vec![true; d],
            MaskMode::PerCoordinate { p_mask } => (0..d).map(|_| rng.random_bool(p_mask)).collect(),
        }
    };

    let mut first = draw_mask(rng);
    first[..dims.d_u].iter_mut().for_each(|b| *b = true);
    let mut obs_indices = vec![0];
    let mut masks = vec![first];
    for k in 1..grid.len() {
        if !rng.random_bool(p) {
            continue;
        }
        let mask = draw_mask(rng);
        if mask.iter().any(|&b| b) {
            obs_indices.push(k);
            masks.push(mask);
        }
    }
    ObservationPattern::new(obs_indices, masks, dims)
}

/// One realization of the input/output process with its observation pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    grid: Arc<TimeGrid>,
    u: Array2<f64>,
    v: Array2<f64>,
    pattern: ObservationPattern,
    latent: BTreeMap<String, f64>,
    noisy_v: Option<Array2<f64>>,
}

impl PathSample {
    pub fn new(
        grid: Arc<TimeGrid>,
        u: Array2<f64>,
        v: Array2<f64>,
        pattern: ObservationPattern,
        latent: BTreeMap<String, f64>,
    ) -> Result<Self> {
        let n = grid.len();
        let dims = pattern.dims();
        if u.dim() != (n, dims.d_u) {
            return Err(Error::invalid(format!(
                "input values have shape {:?}, expected ({n}, {})",
                u.dim(),
                dims.d_u
            )));
        }
        if v.dim() != (n, dims.d_v) {
            return Err(Error::invalid(format!(
                "output values have shape {:?}, expected ({n}, {})",
                v.dim(),
                dims.d_v
            )));
        }
        if pattern.obs_indices().last().is_some_and(|&k| k >= n) {
            return Err(Error::invalid("observation index beyond the grid"));
        }
        if let Some((name, _)) = latent.iter().find(|(_, x)| !x.is_finite()) {
            return Err(Error::invalid(format!(
                "latent parameter `{name}` is not finite"
            )));
        }
        Ok(Self {
            grid,
            u,
            v,
            pattern,
            latent,
            noisy_v: None,
        })
    }

    /// Attaches noisy observations `O = V + eps` of the output process.
    pub fn with_noisy_outputs(mut self, noisy: Array2<f64>) -> Result<Self> {
        if noisy.dim() != self.v.dim() {
            return Err(Error::invalid("noisy outputs must match the output shape"));
        }
        self.noisy_v = Some(noisy);
        Ok(self)
    }

    /// Copy with a different observation pattern (same dimensions).
    pub fn with_pattern(&self, pattern: ObservationPattern) -> Result<Self> {
        if pattern.dims() != self.dims() {
            return Err(Error::invalid("pattern dimensions differ from the sample"));
        }
        let mut out = self.clone();
        out.pattern = pattern;
        Ok(out)
    }

    /// Copy with every observation strictly after `t` removed.
    pub fn observed_until(&self, t: f64) -> Self {
        let mut out = self.clone();
        if let Some(k) = self.grid.floor_index(t) {
            out.pattern = self.pattern.truncated(k);
        }
        out
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn shared_grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn u(&self) -> &Array2<f64> {
        &self.u
    }

    pub fn v(&self) -> &Array2<f64> {
        &self.v
    }

    pub fn noisy_v(&self) -> Option<&Array2<f64>> {
        self.noisy_v.as_ref()
    }

    pub fn pattern(&self) -> &ObservationPattern {
        &self.pattern
    }

    pub fn latent(&self) -> &BTreeMap<String, f64> {
        &self.latent
    }

    pub fn dims(&self) -> Dims {
        self.pattern.dims()
    }

    pub fn n_obs(&self) -> usize {
        self.pattern.len()
    }

    /// Time of observation `i` (`i = 0` is `t0 = 0`).
    pub fn obs_time(&self, i: usize) -> f64 {
        self.grid.times()[self.pattern.obs_indices()[i]]
    }

    pub fn obs_times(&self) -> Vec<f64> {
        self.pattern
            .obs_indices()
            .iter()
            .map(|&k| self.grid.times()[k])
            .collect()
    }

    /// Input values at observation `i` (unmasked; consult the mask).
    pub fn obs_u(&self, i: usize) -> ArrayView1<'_, f64> {
        self.u.row(self.pattern.obs_indices()[i])
    }

    /// Output values at observation `i`.
    pub fn obs_v(&self, i: usize) -> ArrayView1<'_, f64> {
        self.v.row(self.pattern.obs_indices()[i])
    }

    pub fn u0(&self) -> Vec<f64> {
        self.u.row(0).to_vec()
    }
}

/// Last observation time `<= t` (`0` when only `t0` has been seen).
pub fn tau(pattern: &ObservationPattern, grid: &TimeGrid, t: f64) -> f64 {
    let tol = TIME_TOL * grid.horizon();
    pattern
        .obs_indices()
        .iter()
        .map(|&k| grid.times()[k])
        .take_while(|&s| s <= t + tol)
        .last()
        .unwrap_or(0.0)
}

/// Continuous forward-fill interpolation `Ũ^{≤cutoff}` of the observed inputs,
/// evaluated at `query`.
///
/// Per coordinate `j`, with `a` the last `j`-observation at or before
/// `min(query, cutoff)` and `b` the first `j`-observation in `[query, cutoff]`:
/// the value is `U_a` up to the observation time preceding `t_b`, and moves
/// linearly to `U_b` on the last inter-observation interval before `t_b`.
/// Without such a `b` the path stays at `U_a`.
pub fn interpolate_forward_fill(sample: &PathSample, cutoff: f64, query: f64) -> Vec<f64> {
    let grid = sample.grid();
    let tol = TIME_TOL * grid.horizon();
    let times = sample.obs_times();
    let pattern = sample.pattern();
    // snap to observation times so observed values are reproduced exactly
    let snap = |x: f64| {
        times
            .iter()
            .copied()
            .find(|&s| (s - x).abs() <= tol)
            .unwrap_or(x)
    };
    let query = snap(query);
    let cutoff = snap(cutoff);
    let upto = query.min(cutoff);

    (0..sample.dims().d_u)
        .map(|j| {
            let a = (0..times.len())
                .rev()
                .find(|&i| times[i] <= upto && pattern.mask(i)[j])
                .unwrap_or(0);
            let ua = sample.obs_u(a)[j];
            let b = (1..times.len())
                .find(|&i| times[i] >= query && times[i] <= cutoff && pattern.mask(i)[j]);
            match b {
                Some(b) if query > times[b - 1] => {
                    let (tb, tp) = (times[b], times[b - 1]);
                    let ub = sample.obs_u(b)[j];
                    ua * ((tb - query) / (tb - tp)) + ub * ((query - tp) / (tb - tp))
                }
                _ => ua,
            }
        })
        .collect()
}

/// Auxiliary path statistics available at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathStats {
    /// Running maximum of `|Ũ^{≤s}_s|_1` over grid points `s <= t`.
    pub u_star: f64,
    /// Number of observations in `(0, t]`.
    pub n_t: usize,
    /// Smallest gap between consecutive observations `<= t`, or `T` if there
    /// is only `t0`.
    pub delta_t: f64,
}

pub fn path_stats(sample: &PathSample, t: f64) -> PathStats {
    let grid = sample.grid();
    let tol = TIME_TOL * grid.horizon();
    let pattern = sample.pattern();
    let d_u = sample.dims().d_u;

    let mut current = sample.u0();
    let mut u_star: f64 = current.iter().map(|x| x.abs()).sum();
    let mut n_t = 0;
    let mut delta_t = grid.horizon();
    let mut last = 0.0;
    for i in 1..sample.n_obs() {
        let ti = sample.obs_time(i);
        if ti > t + tol {
            break;
        }
        n_t += 1;
        delta_t = delta_t.min(ti - last);
        last = ti;
        let u = sample.obs_u(i);
        for j in 0..d_u {
            if pattern.mask(i)[j] {
                current[j] = u[j];
            }
        }
        u_star = u_star.max(current.iter().map(|x| x.abs()).sum());
    }
    PathStats {
        u_star,
        n_t,
        delta_t,
    }
}
