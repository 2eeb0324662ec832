//! Network inputs built from the observations seen so far.
//!
//! Layouts (H first when present):
//! - drift: `[H, t, τ(t), π_m(Ũ^{≤τ(t)} − U₀), U₀, Ũ*, n, δ]`
//! - jump: `[H_{t−} (recurrent only), t_i, π_m(Ũ^{≤t_i} − U₀), U₀, Ũ*, n, δ, U_{t_i} (zero-imputed), M^U_{t_i}]`

use crate::error::{Error, Result};
use crate::paths::PathSample;
use crate::signature::{sig_dim, TruncatedSignature};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Drift,
    Jump,
}

/// Width of the non-latent part of the drift input.
pub fn drift_feature_width(d_u: usize, level: usize) -> Result<usize> {
    Ok(2 + static_width(d_u, level)?)
}

/// Width of the non-latent part of the jump input.
pub fn jump_feature_width(d_u: usize, level: usize) -> Result<usize> {
    Ok(1 + static_width(d_u, level)? + 2 * d_u)
}

fn static_width(d_u: usize, level: usize) -> Result<usize> {
    Ok(sig_dim(d_u, level)? + d_u + 3)
}

/// Incrementally maintained summary of the observed input path.
///
/// Between consecutive observation times the interpolated path moves
/// linearly from the previous forward-filled point to the new one, so each
/// observation appends one segment to the signature.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationState {
    u0: Vec<f64>,
    filled: Vec<f64>,
    sig: TruncatedSignature,
    u_star: f64,
    n: usize,
    delta: f64,
    last_time: f64,
    horizon: f64,
}

fn l1(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

impl ObservationState {
    /// State after the (fully observed) initial input `u0` at `t = 0`.
    pub fn start(u0: &[f64], level: usize, horizon: f64) -> Result<Self> {
        if u0.is_empty() || u0.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(
                "initial input must be a nonempty finite vector",
            ));
        }
        Ok(Self {
            u0: u0.to_vec(),
            filled: u0.to_vec(),
            sig: TruncatedSignature::trivial(u0.len(), level)?,
            u_star: l1(u0),
            n: 0,
            delta: horizon,
            last_time: 0.0,
            horizon,
        })
    }

    /// Incorporates an observation at `t` (strictly after the previous one);
    /// masked coordinates keep their forward-filled value.
    pub fn observe(&mut self, t: f64, values: &[f64], mask: &[bool]) -> Result<()> {
        if values.len() != self.u0.len() || mask.len() != self.u0.len() {
            return Err(Error::invalid("observation has the wrong input dimension"));
        }
        if !(t > self.last_time) {
            return Err(Error::invalid(format!(
                "observation at {t} is not after the previous one at {}",
                self.last_time
            )));
        }
        let mut next = self.filled.clone();
        for ((x, &v), &m) in next.iter_mut().zip(values).zip(mask) {
            if m {
                if !v.is_finite() {
                    return Err(Error::invalid("observed value is not finite"));
                }
                *x = v;
            }
        }
        let inc: Vec<f64> = next.iter().zip(&self.filled).map(|(a, b)| a - b).collect();
        self.sig.extend_with_segment(&inc)?;
        self.u_star = self.u_star.max(l1(&next));
        self.delta = self.delta.min(t - self.last_time);
        self.n += 1;
        self.last_time = t;
        self.filled = next;
        Ok(())
    }

    /// `τ(t)` for any `t` at or after the last observation.
    pub fn tau(&self) -> f64 {
        self.last_time
    }

    pub fn n_obs(&self) -> usize {
        self.n
    }

    pub fn u_star(&self) -> f64 {
        self.u_star
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn signature(&self) -> &TruncatedSignature {
        &self.sig
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Current forward-filled input value.
    pub fn filled(&self) -> &[f64] {
        &self.filled
    }

    fn push_static(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.sig.coeffs());
        out.extend_from_slice(&self.u0);
        out.push(self.u_star);
        out.push(self.n as f64);
        out.push(self.delta);
    }

    /// Non-latent drift features at time `t`.
    pub fn drift_features_into(&self, t: f64, out: &mut Vec<f64>) {
        out.push(t);
        out.push(self.last_time);
        self.push_static(out);
    }

    /// Non-latent jump features right after the observation `(values, mask)`
    /// has been incorporated.
    pub fn jump_features_into(&self, values: &[f64], mask: &[bool], out: &mut Vec<f64>) {
        out.push(self.last_time);
        self.push_static(out);
        out.extend(
            values
                .iter()
                .zip(mask)
                .map(|(&v, &m)| if m { v } else { 0.0 }),
        );
        out.extend(mask.iter().map(|&m| f64::from(u8::from(m))));
    }
}

/// Builds the state of `sample` from all observations at or before `t`.
pub fn state_at(sample: &PathSample, level: usize, t: f64) -> Result<ObservationState> {
    let pat = sample.pattern();
    let grid = sample.grid();
    let mut st = ObservationState::start(&sample.u0(), level, grid.horizon())?;
    let tol = crate::paths::TIME_TOL * grid.horizon();
    for (i, &k) in pat.obs_indices().iter().enumerate().skip(1) {
        if grid.times()[k] > t + tol {
            break;
        }
        let vals = sample.u().row(k).to_vec();
        st.observe(grid.times()[k], &vals, pat.input_mask(i))?;
    }
    Ok(st)
}

/// Full network input (latent part included) of the given kind at time `t`.
/// For jumps the observation used is the last one at or before `t`.
pub fn model_features(
    sample: &PathSample,
    t: f64,
    h: &[f64],
    kind: FeatureKind,
    level: usize,
    recurrent: bool,
) -> Result<Vec<f64>> {
    let st = state_at(sample, level, t)?;
    let mut out = Vec::new();
    match kind {
        FeatureKind::Drift => {
            out.extend_from_slice(h);
            st.drift_features_into(t, &mut out);
        }
        FeatureKind::Jump => {
            if recurrent {
                out.extend_from_slice(h);
            }
            let grid = sample.grid();
            let k = grid
                .floor_index(st.tau())
                .ok_or_else(|| Error::invalid("time before the start of the grid"))?;
            let i = sample
                .pattern()
                .position_of(k)
                .ok_or_else(|| Error::invalid("no observation at τ(t)"))?;
            let vals = sample.u().row(k).to_vec();
            st.jump_features_into(&vals, sample.pattern().input_mask(i), &mut out);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{path_stats, Dims, ObservationPattern, TimeGrid};
    use ndarray::Array2;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn sample() -> PathSample {
        let grid = Arc::new(TimeGrid::uniform(1.0, 10).unwrap());
        let u = Array2::from_shape_fn((11, 2), |(k, j)| (k as f64) * 0.3 - j as f64);
        let v = Array2::zeros((11, 1));
        let pat = ObservationPattern::new(
            vec![0, 3, 4, 8],
            vec![
                vec![true, true, false],
                vec![true, false, true],
                vec![false, true, true],
                vec![true, true, true],
            ],
            Dims::new(2, 1),
        )
        .unwrap();
        PathSample::new(grid, u, v, pat, BTreeMap::new()).unwrap()
    }

    #[test]
    fn widths_match_layout() {
        let s = sample();
        let h = vec![0.0; 7];
        let drift = model_features(&s, 0.55, &h, FeatureKind::Drift, 3, true).unwrap();
        assert_eq!(drift.len(), 7 + drift_feature_width(2, 3).unwrap());
        assert_eq!(drift.len(), 7 + 5 + 15 + 2);
        let jump = model_features(&s, 0.4, &h, FeatureKind::Jump, 3, true).unwrap();
        assert_eq!(jump.len(), 7 + jump_feature_width(2, 3).unwrap());
        let jump = model_features(&s, 0.4, &h, FeatureKind::Jump, 3, false).unwrap();
        assert_eq!(jump.len(), jump_feature_width(2, 3).unwrap());
    }

    #[test]
    fn start_features() {
        let s = sample();
        let f = model_features(&s, 0.0, &[], FeatureKind::Drift, 2, false).unwrap();
        // t, τ, trivial signature (7), U0 (2), u*, n, δ
        assert_eq!(&f[..2], &[0.0, 0.0]);
        assert_eq!(&f[2..9], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&f[9..11], &[0.0, -1.0]);
        assert_eq!(&f[11..], &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn drift_features_change_only_through_time_between_observations() {
        let s = sample();
        let h = [0.1, 0.2];
        let a = model_features(&s, 0.5, &h, FeatureKind::Drift, 3, false).unwrap();
        let b = model_features(&s, 0.7, &h, FeatureKind::Drift, 3, false).unwrap();
        assert_eq!(a[2], 0.5);
        assert_eq!(b[2], 0.7);
        assert_eq!(a[..2], b[..2]);
        assert_eq!(a[3..], b[3..]);
    }

    #[test]
    fn incremental_stats_match_path_stats() {
        let s = sample();
        for &t in &[0.0, 0.25, 0.3, 0.35, 0.4, 0.8, 1.0] {
            let st = state_at(&s, 3, t).unwrap();
            let ps = path_stats(&s, t);
            assert_eq!(st.n_obs(), ps.n_t);
            assert!((st.delta() - ps.delta_t).abs() < 1e-12);
            assert!((st.u_star() - ps.u_star).abs() < 1e-12);
            let sig =
                crate::signature::signature_of_interpolated_path(&s, st.tau(), 3, &s.u0()).unwrap();
            for (x, y) in sig.coeffs().iter().zip(st.signature().coeffs()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_order_observation_is_rejected() {
        let mut st = ObservationState::start(&[0.0], 2, 1.0).unwrap();
        st.observe(0.5, &[1.0], &[true]).unwrap();
        assert!(st.observe(0.5, &[1.0], &[true]).is_err());
        assert!(st.observe(0.2, &[1.0], &[true]).is_err());
    }
}
