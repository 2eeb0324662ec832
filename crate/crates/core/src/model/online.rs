use std::sync::Arc;

use ndarray::Array2;

use super::features::ObservationState;
use super::NjodeParams;
use crate::error::{Error, Result};
use crate::nn::Tape;
use crate::paths::TimeGrid;

/// One incoming observation of the input process.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationEvent {
    pub time: f64,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Incremental evaluation of the model as observations arrive.
///
/// The latent state is advanced with the same Euler grid as the offline
/// forward pass, so both agree up to rounding.
#[derive(Debug, Clone)]
pub struct OnlinePredictor<'a> {
    params: &'a NjodeParams,
    grid: Arc<TimeGrid>,
    state: ObservationState,
    h: Array2<f64>,
    k: usize,
    last_event: usize,
}

impl<'a> OnlinePredictor<'a> {
    /// Starts a session from the fully observed initial input at `t = 0`.
    pub fn new(params: &'a NjodeParams, grid: Arc<TimeGrid>, u0: &[f64]) -> Result<Self> {
        if u0.len() != params.arch.dims.d_u {
            return Err(Error::invalid("initial input has the wrong dimension"));
        }
        if grid.len() < 2 {
            return Err(Error::invalid("grid needs at least two points"));
        }
        let state = ObservationState::start(u0, params.arch.sig_level, grid.horizon())?;
        let mut p = Self {
            params,
            grid,
            state,
            h: Array2::zeros((1, params.arch.d_h)),
            k: 0,
            last_event: 0,
        };
        let full = vec![true; u0.len()];
        p.jump(u0, &full)?;
        Ok(p)
    }

    /// Time of the latent state.
    pub fn time(&self) -> f64 {
        self.grid.times()[self.k]
    }

    pub fn state(&self) -> &ObservationState {
        &self.state
    }

    fn jump(&mut self, values: &[f64], mask: &[bool]) -> Result<()> {
        let p = self.params;
        let mut feats = Vec::new();
        self.state.jump_features_into(values, mask, &mut feats);
        let width = feats.len();
        let mut tape = Tape::new(&p.store);
        let h = tape.input(self.h.clone());
        let feats = Array2::from_shape_vec((1, width), feats).expect("one feature row");
        let hn = p.jump(&mut tape, h, feats, None)?;
        self.h = tape.value(hn).clone();
        if self.h.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { grid_index: self.k });
        }
        Ok(())
    }

    fn advance_to(&mut self, target: usize) -> Result<()> {
        let p = self.params;
        let times = self.grid.times();
        while self.k < target {
            let mut feats = Vec::new();
            self.state.drift_features_into(times[self.k], &mut feats);
            let width = feats.len();
            let mut tape = Tape::new(&p.store);
            let h = tape.input(self.h.clone());
            let feats = Array2::from_shape_vec((1, width), feats).expect("one feature row");
            let dt = times[self.k + 1] - times[self.k];
            let hn = p.drift_step(&mut tape, h, feats, dt, None)?;
            self.h = tape.value(hn).clone();
            self.k += 1;
            if self.h.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence { grid_index: self.k });
            }
        }
        Ok(())
    }

    /// Incorporates an observation; its time must be a grid point after the
    /// previous observation and not before the last query.
    pub fn observe(&mut self, event: &ObservationEvent) -> Result<()> {
        let j = self.grid.index_of(event.time).ok_or_else(|| {
            Error::invalid(format!(
                "observation time {} is not on the grid",
                event.time
            ))
        })?;
        if j <= self.last_event || j < self.k {
            return Err(Error::invalid(format!(
                "observation at {} arrives out of order",
                event.time
            )));
        }
        if event.values.len() != self.params.arch.dims.d_u || event.mask.len() != event.values.len()
        {
            return Err(Error::invalid("observation has the wrong input dimension"));
        }
        self.advance_to(j)?;
        self.state
            .observe(self.grid.times()[j], &event.values, &event.mask)?;
        self.jump(&event.values, &event.mask)?;
        self.last_event = j;
        Ok(())
    }

    /// Prediction `G_t` using the observations received so far (`t` is
    /// rounded down to the grid).
    pub fn predict(&mut self, t: f64) -> Result<Vec<f64>> {
        let j = self
            .grid
            .floor_index(t)
            .filter(|_| t <= self.grid.horizon() * (1.0 + crate::paths::TIME_TOL))
            .ok_or_else(|| Error::invalid(format!("query time {t} outside the grid")))?;
        if j < self.k {
            return Err(Error::invalid(format!(
                "query at {t} lies before the current time"
            )));
        }
        self.advance_to(j)?;
        let mut tape = Tape::new(&self.params.store);
        let h = tape.input(self.h.clone());
        let g = self.params.readout(&mut tape, h, None)?;
        Ok(tape.value(g).row(0).to_vec())
    }
}

/// Predictions at ascending `queries` from an ascending event stream whose
/// first event is the full observation at `t = 0`. Events at a query time are
/// applied before answering it.
pub fn predict_online(
    params: &NjodeParams,
    grid: Arc<TimeGrid>,
    events: &[ObservationEvent],
    queries: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let Some(first) = events.first() else {
        return Err(Error::invalid(
            "event stream must start with the initial observation",
        ));
    };
    if first.time != 0.0 || first.mask.iter().any(|&m| !m) {
        return Err(Error::invalid(
            "first event must be a full observation at t = 0",
        ));
    }
    let tol = crate::paths::TIME_TOL * grid.horizon();
    let mut pred = OnlinePredictor::new(params, grid, &first.values)?;
    let mut next = 1;
    let mut out = Vec::with_capacity(queries.len());
    for &q in queries {
        while next < events.len() && events[next].time <= q + tol {
            pred.observe(&events[next])?;
            next += 1;
        }
        out.push(pred.predict(q)?);
    }
    Ok(out)
}
