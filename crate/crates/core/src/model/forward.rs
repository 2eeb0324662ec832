use ndarray::{Array2, Axis};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::features::ObservationState;
use super::NjodeParams;
use crate::error::{Error, Result};
use crate::nn::{NodeId, Tape};
use crate::paths::PathSample;

/// Paths evaluated together in one batched pass.
const EVAL_CHUNK: usize = 256;

/// Evaluation runs without dropout; training mode samples fresh dropout
/// masks at every network call.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

/// Model outputs along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Readout `G` on every grid point (post-jump at observation times).
    pub g: Array2<f64>,
    /// Latent state on every grid point (post-jump), when requested.
    pub h: Option<Array2<f64>>,
    /// Grid indices of the observations.
    pub obs_indices: Vec<usize>,
    /// `G_{t_i−}` per observation.
    pub pre: Array2<f64>,
    /// `G_{t_i}` per observation.
    pub post: Array2<f64>,
}

impl ForwardTrace {
    /// Left limit `G_{t−}` at grid index `k`.
    pub fn left_limit(&self, k: usize) -> Vec<f64> {
        match self.obs_indices.binary_search(&k) {
            Ok(i) => self.pre.row(i).to_vec(),
            Err(_) => self.g.row(k).to_vec(),
        }
    }
}

/// Readouts recorded on a training tape at one grid index.
pub(crate) struct ObsReadout {
    pub rows: Vec<usize>,
    /// Position of the observation in each row's pattern.
    pub obs_pos: Vec<usize>,
    pub k: usize,
    pub pre: NodeId,
    pub post: NodeId,
}

/// Per-path values collected in evaluation mode.
struct EvalSink {
    full_grid: bool,
    g: Vec<Array2<f64>>,
    h: Option<Vec<Array2<f64>>>,
    pre: Vec<Vec<Vec<f64>>>,
    post: Vec<Vec<Vec<f64>>>,
}

fn check_batch(params: &NjodeParams, samples: &[&PathSample]) -> Result<()> {
    let Some(first) = samples.first() else {
        return Err(Error::invalid("empty batch"));
    };
    for s in samples {
        if s.dims() != params.arch.dims {
            return Err(Error::invalid(format!(
                "sample dimensions {:?} differ from the model's {:?}",
                s.dims(),
                params.arch.dims
            )));
        }
        if s.grid() != first.grid() {
            return Err(Error::invalid("paths in a batch must share the time grid"));
        }
    }
    if first.grid().len() < 2 {
        return Err(Error::invalid("grid needs at least two points"));
    }
    Ok(())
}

/// Runs the model over a batch of paths sharing one grid.
///
/// With a sink the tape is restarted after every grid step and all readouts
/// are copied into the sink; without one, the whole computation stays on the
/// tape and only readouts at observation rows are recorded.
fn run_batch<'p>(
    params: &'p NjodeParams,
    samples: &[&PathSample],
    tape: &mut Tape<'p>,
    mut rng: Option<&mut ChaCha8Rng>,
    mut sink: Option<&mut EvalSink>,
) -> Result<Vec<ObsReadout>> {
    check_batch(params, samples)?;
    let arch = &params.arch;
    let grid = samples[0].grid();
    let times = grid.times();
    let n = times.len();
    let b = samples.len();
    let level = arch.sig_level;

    let mut states = samples
        .iter()
        .map(|s| ObservationState::start(&s.u0(), level, grid.horizon()))
        .collect::<Result<Vec<_>>>()?;
    let mut next_obs = vec![0usize; b];
    let mut readouts = Vec::new();
    let drift_w = arch.drift_input_width()? - arch.d_h;
    let jump_w = arch.jump_input_width()? - if arch.recurrent_encoder { arch.d_h } else { 0 };

    let mut h = tape.input(Array2::zeros((b, arch.d_h)));
    for k in 0..n {
        let mut rows = Vec::new();
        let mut obs_pos = Vec::new();
        for (p, s) in samples.iter().enumerate() {
            let idx = s.pattern().obs_indices();
            if next_obs[p] < idx.len() && idx[next_obs[p]] == k {
                rows.push(p);
                obs_pos.push(next_obs[p]);
                next_obs[p] += 1;
            }
        }
        if !rows.is_empty() {
            let hm = tape.gather_rows(h, &rows);
            let pre = params.readout(tape, hm, rng.as_deref_mut())?;
            let mut feats = Vec::with_capacity(rows.len() * jump_w);
            for (&p, &i) in rows.iter().zip(&obs_pos) {
                let s = samples[p];
                let vals = s.u().row(k).to_vec();
                let mask = s.pattern().input_mask(i);
                if k > 0 {
                    states[p].observe(times[k], &vals, mask)?;
                }
                states[p].jump_features_into(&vals, mask, &mut feats);
            }
            let feats =
                Array2::from_shape_vec((rows.len(), jump_w), feats).expect("jump feature layout");
            let hnew = params.jump(tape, hm, feats, rng.as_deref_mut())?;
            h = tape.scatter_rows(h, hnew, &rows);
            if let Some(sink) = sink.as_deref_mut() {
                for (r, &p) in rows.iter().enumerate() {
                    sink.pre[p].push(tape.value(pre).row(r).to_vec());
                }
                if !sink.full_grid {
                    let post = params.readout(tape, hnew, rng.as_deref_mut())?;
                    for (r, &p) in rows.iter().enumerate() {
                        sink.post[p].push(tape.value(post).row(r).to_vec());
                    }
                }
            } else {
                let post = params.readout(tape, hnew, rng.as_deref_mut())?;
                readouts.push(ObsReadout {
                    rows,
                    obs_pos,
                    k,
                    pre,
                    post,
                });
            }
        }
        if tape.value(h).iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { grid_index: k });
        }
        if let Some(sink) = sink.as_deref_mut().filter(|s| s.full_grid) {
            let g = params.readout(tape, h, rng.as_deref_mut())?;
            for p in 0..b {
                sink.g[p].row_mut(k).assign(&tape.value(g).row(p));
                if let Some(hs) = sink.h.as_mut() {
                    hs[p].row_mut(k).assign(&tape.value(h).row(p));
                }
            }
        }
        if k + 1 < n {
            let mut feats = Vec::with_capacity(b * drift_w);
            for st in &states {
                st.drift_features_into(times[k], &mut feats);
            }
            let feats = Array2::from_shape_vec((b, drift_w), feats).expect("drift feature layout");
            h = params.drift_step(tape, h, feats, times[k + 1] - times[k], rng.as_deref_mut())?;
            if sink.is_some() {
                let hv = tape.value(h).clone();
                *tape = Tape::new(&params.store);
                h = tape.input(hv);
            }
        }
    }
    Ok(readouts)
}

/// Records a training pass on `tape`; returns the observation readouts.
pub(crate) fn forward_tape<'p>(
    params: &'p NjodeParams,
    samples: &[&PathSample],
    tape: &mut Tape<'p>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<ObsReadout>> {
    run_batch(params, samples, tape, rng, None)
}

fn traces_for(
    params: &NjodeParams,
    samples: &[&PathSample],
    full_grid: bool,
    store_latent: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<ForwardTrace>> {
    let n = if full_grid {
        samples[0].grid().len()
    } else {
        0
    };
    let d_v = params.arch.dims.d_v;
    let mut sink = EvalSink {
        full_grid,
        g: vec![Array2::zeros((n, d_v)); samples.len()],
        h: (full_grid && store_latent)
            .then(|| vec![Array2::zeros((n, params.arch.d_h)); samples.len()]),
        pre: vec![Vec::new(); samples.len()],
        post: vec![Vec::new(); samples.len()],
    };
    let mut tape = Tape::new(&params.store);
    run_batch(params, samples, &mut tape, rng, Some(&mut sink))?;
    let EvalSink {
        g, h, pre, post, ..
    } = sink;
    let mut h = h.map(|v| v.into_iter());
    let rows = |r: Vec<Vec<f64>>| {
        Array2::from_shape_vec((r.len(), d_v), r.concat()).expect("readout layout")
    };
    Ok(samples
        .iter()
        .zip(g)
        .zip(pre.into_iter().zip(post))
        .map(|((s, g), (pre, post))| {
            let obs_indices = s.pattern().obs_indices().to_vec();
            let post = if full_grid {
                g.select(Axis(0), &obs_indices)
            } else {
                rows(post)
            };
            ForwardTrace {
                g,
                h: h.as_mut().and_then(|it| it.next()),
                obs_indices,
                pre: rows(pre),
                post,
            }
        })
        .collect())
}

/// Runs the model along one path.
pub fn forward_path(
    params: &NjodeParams,
    sample: &PathSample,
    mode: Mode<'_>,
) -> Result<ForwardTrace> {
    let rng = match mode {
        Mode::Eval => None,
        Mode::Train(r) => Some(r),
    };
    Ok(traces_for(params, &[sample], true, true, rng)?
        .pop()
        .expect("one trace"))
}

/// Evaluation-mode traces for many paths (batched, in parallel chunks).
pub fn forward_batch(
    params: &NjodeParams,
    samples: &[PathSample],
    store_latent: bool,
) -> Result<Vec<ForwardTrace>> {
    let refs: Vec<&PathSample> = samples.iter().collect();
    let chunks = refs
        .par_chunks(EVAL_CHUNK)
        .map(|c| traces_for(params, c, true, store_latent, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Like [`forward_batch`] but only computes the readouts at observation
/// times; `g` of the returned traces has no rows.
pub fn forward_batch_observed(
    params: &NjodeParams,
    samples: &[PathSample],
) -> Result<Vec<ForwardTrace>> {
    let refs: Vec<&PathSample> = samples.iter().collect();
    let chunks = refs
        .par_chunks(EVAL_CHUNK)
        .map(|c| traces_for(params, c, false, false, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate, GenerationConfig, ModelSpec};
    use crate::model::Architecture;
    use crate::nn::Activation;

    fn data() -> Vec<PathSample> {
        let spec = ModelSpec::BMDrift {
            x0: 0.0,
            sigma: 0.2,
            a: 0.05,
            b: 0.1,
        };
        let mut cfg = GenerationConfig::new(10, 0, 5);
        cfg.n_steps = 20;
        cfg.obs_probability = 0.3;
        generate(&spec, &cfg).unwrap().0.samples
    }

    fn params() -> NjodeParams {
        let arch = Architecture::new(crate::paths::Dims::new(1, 1), 6, Activation::Tanh);
        NjodeParams::init(arch, 1).unwrap()
    }

    #[test]
    fn zero_networks_give_zero_outputs() {
        let mut p = params();
        for id in p.store.ids().collect::<Vec<_>>() {
            if p.store.get(id).dim() != (1, 1) {
                p.store.get_mut(id).fill(0.0);
            }
        }
        let tr = forward_path(&p, &data()[0], Mode::Eval).unwrap();
        assert!(tr.g.iter().all(|&x| x == 0.0));
        assert!(tr.h.unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_drift_keeps_latent_constant_between_observations() {
        let mut p = params();
        for l in p.f_net.inner.layers().to_vec() {
            p.store.get_mut(l.w).fill(0.0);
            p.store.get_mut(l.b).fill(0.0);
        }
        let s = &data()[0];
        let tr = forward_path(&p, s, Mode::Eval).unwrap();
        let h = tr.h.unwrap();
        for k in 1..h.nrows() {
            if s.pattern().position_of(k).is_none() {
                assert_eq!(h.row(k), h.row(k - 1));
            }
        }
    }

    #[test]
    fn batch_matches_single_paths() {
        let p = params();
        let d = data();
        let batch = forward_batch(&p, &d, false).unwrap();
        for (s, tb) in d.iter().zip(&batch) {
            let ts = forward_path(&p, s, Mode::Eval).unwrap();
            for (a, b) in ts.g.iter().zip(tb.g.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in ts.pre.iter().zip(tb.pre.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn observed_only_pass_matches_full_pass() {
        let p = params();
        let d = data();
        let full = forward_batch(&p, &d, false).unwrap();
        let obs = forward_batch_observed(&p, &d).unwrap();
        for (a, b) in full.iter().zip(&obs) {
            assert_eq!(a.pre, b.pre);
            for (x, y) in a.post.iter().zip(b.post.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn left_limits_agree_off_observations() {
        let p = params();
        let s = &data()[1];
        let tr = forward_path(&p, s, Mode::Eval).unwrap();
        for k in 0..tr.g.nrows() {
            if s.pattern().position_of(k).is_none() {
                assert_eq!(tr.left_limit(k), tr.g.row(k).to_vec());
            }
        }
    }
}
