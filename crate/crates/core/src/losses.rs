//! Objective functions evaluated on a [`ForwardTrace`] against the observed
//! targets of a [`PathSample`].
//!
//! Every loss averages per-observation terms over the observations after
//! `t₀` (the initial observation is never scored).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::paths::PathSample;

/// Floor added under the square roots of the original loss.
pub const OLD_LOSS_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Pre- and post-jump errors squared separately.
    Io,
    /// Square of the sum of the two error norms.
    Old,
    /// Post-jump error only.
    Jump,
    /// Pre-jump error against noisy observations of the target.
    Noisy,
}

/// Loss of one path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLoss {
    pub value: f64,
    /// Observations after `t₀` that entered the average.
    pub n_terms: usize,
}

impl PathLoss {
    /// Set when the path has no scored observations (value is 0 then).
    pub fn is_degenerate(&self) -> bool {
        self.n_terms == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub per_path: Vec<f64>,
    pub n_terms: Vec<usize>,
    /// Paths without any scored observation.
    pub degenerate_paths: usize,
}

/// Value and gradients (w.r.t. the pre- and post-jump outputs) of one
/// observation term.
pub(crate) struct Term {
    pub value: f64,
    pub d_pre: Vec<f64>,
    pub d_post: Vec<f64>,
}

fn masked_sq(pred: &[f64], target: &[f64], mask: &[bool]) -> (f64, Vec<f64>) {
    let mut sum = 0.0;
    let diff = pred
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((&p, &t), &m)| {
            if m {
                let d = p - t;
                sum += d * d;
                d
            } else {
                0.0
            }
        })
        .collect();
    (sum, diff)
}

/// `target` is `V` for all variants except [`LossVariant::Noisy`], where it is
/// the noisy observation `O`.
pub(crate) fn term(
    variant: LossVariant,
    pre: &[f64],
    post: &[f64],
    target: &[f64],
    mask: &[bool],
    eps: f64,
) -> Term {
    let (a, da) = masked_sq(post, target, mask);
    let (b, db) = masked_sq(pre, target, mask);
    let zero = || vec![0.0; target.len()];
    let scaled = |d: &[f64], c: f64| d.iter().map(|x| 2.0 * c * x).collect::<Vec<_>>();
    match variant {
        LossVariant::Io => Term {
            value: a + b,
            d_pre: scaled(&db, 1.0),
            d_post: scaled(&da, 1.0),
        },
        LossVariant::Old => {
            let (ra, rb) = ((a + eps).sqrt(), (b + eps).sqrt());
            let s = ra + rb;
            Term {
                value: s * s,
                d_pre: scaled(&db, s / rb),
                d_post: scaled(&da, s / ra),
            }
        }
        LossVariant::Jump => Term {
            value: a,
            d_pre: zero(),
            d_post: scaled(&da, 1.0),
        },
        LossVariant::Noisy => Term {
            value: b,
            d_pre: scaled(&db, 1.0),
            d_post: zero(),
        },
    }
}

/// Target used for observation `i` of `sample` under `variant`.
pub(crate) fn target_row(variant: LossVariant, sample: &PathSample, i: usize) -> Result<Vec<f64>> {
    let k = sample.pattern().obs_indices()[i];
    match variant {
        LossVariant::Noisy => sample
            .noisy_v()
            .map(|o| o.row(k).to_vec())
            .ok_or_else(|| Error::invalid("noisy loss needs noisy observations of the target")),
        _ => Ok(sample.v().row(k).to_vec()),
    }
}

pub fn path_loss(
    variant: LossVariant,
    trace: &ForwardTrace,
    sample: &PathSample,
    eps: f64,
) -> Result<PathLoss> {
    let pat = sample.pattern();
    if trace.obs_indices != pat.obs_indices() || trace.pre.ncols() != sample.dims().d_v {
        return Err(Error::invalid(
            "trace is not aligned with the sample's observations",
        ));
    }
    if variant == LossVariant::Noisy && sample.noisy_v().is_none() {
        return Err(Error::invalid(
            "noisy loss needs noisy observations of the target",
        ));
    }
    let n = pat.len() - 1;
    if n == 0 {
        return Ok(PathLoss {
            value: 0.0,
            n_terms: 0,
        });
    }
    let mut sum = 0.0;
    for i in 1..pat.len() {
        let target = target_row(variant, sample, i)?;
        let pre = trace.pre.row(i).to_vec();
        let post = trace.post.row(i).to_vec();
        sum += term(variant, &pre, &post, &target, pat.output_mask(i), eps).value;
    }
    Ok(PathLoss {
        value: sum / n as f64,
        n_terms: n,
    })
}

pub fn io_loss(trace: &ForwardTrace, sample: &PathSample) -> Result<PathLoss> {
    path_loss(LossVariant::Io, trace, sample, 0.0)
}

pub fn old_loss(trace: &ForwardTrace, sample: &PathSample, eps: f64) -> Result<PathLoss> {
    path_loss(LossVariant::Old, trace, sample, eps)
}

pub fn jump_loss(trace: &ForwardTrace, sample: &PathSample) -> Result<PathLoss> {
    path_loss(LossVariant::Jump, trace, sample, 0.0)
}

pub fn noisy_loss(trace: &ForwardTrace, sample: &PathSample) -> Result<PathLoss> {
    path_loss(LossVariant::Noisy, trace, sample, 0.0)
}

/// Per-path losses and their mean.
pub fn loss_report(
    variant: LossVariant,
    traces: &[ForwardTrace],
    samples: &[PathSample],
    eps: f64,
) -> Result<LossReport> {
    if traces.len() != samples.len() {
        return Err(Error::invalid("one trace per sample is required"));
    }
    if samples.is_empty() {
        return Err(Error::invalid("cannot average a loss over zero paths"));
    }
    let losses = traces
        .iter()
        .zip(samples)
        .map(|(t, s)| path_loss(variant, t, s, eps))
        .collect::<Result<Vec<_>>>()?;
    let per_path: Vec<f64> = losses.iter().map(|l| l.value).collect();
    Ok(LossReport {
        total: per_path.iter().sum::<f64>() / per_path.len() as f64,
        n_terms: losses.iter().map(|l| l.n_terms).collect(),
        degenerate_paths: losses.iter().filter(|l| l.is_degenerate()).count(),
        per_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_observation_examples() {
        let m = [true];
        let io = term(LossVariant::Io, &[0.0], &[0.5], &[1.0], &m, 0.0);
        assert_eq!(io.value, 1.25);
        let old = term(LossVariant::Old, &[0.0], &[0.5], &[1.0], &m, OLD_LOSS_EPS);
        assert!((old.value - 2.25).abs() < 1e-9);
        let jump = term(LossVariant::Jump, &[0.0], &[0.5], &[1.0], &m, 0.0);
        assert_eq!(jump.value, 0.25);
        let noisy = term(LossVariant::Noisy, &[1.0], &[5.0], &[1.2], &m, 0.0);
        assert!((noisy.value - 0.04).abs() < 1e-15);
    }

    #[test]
    fn exact_prediction_hits_the_eps_floor() {
        let old = term(
            LossVariant::Old,
            &[1.0],
            &[1.0],
            &[1.0],
            &[true],
            OLD_LOSS_EPS,
        );
        assert!((old.value - 4.0 * OLD_LOSS_EPS).abs() < 1e-24);
        let io = term(LossVariant::Io, &[1.0], &[1.0], &[1.0], &[true], 0.0);
        assert_eq!(io.value, 0.0);
    }

    #[test]
    fn masked_coordinates_are_ignored() {
        let t = term(
            LossVariant::Io,
            &[0.0, 9.0],
            &[0.0, -9.0],
            &[0.0, 0.0],
            &[true, false],
            0.0,
        );
        assert_eq!(t.value, 0.0);
        assert_eq!(t.d_post, vec![0.0, 0.0]);
    }

    #[test]
    fn old_gradient_matches_finite_differences() {
        let (pre, post, tgt) = ([0.3, -0.2], [0.1, 0.4], [0.0, 0.5]);
        let m = [true, true];
        let t = term(LossVariant::Old, &pre, &post, &tgt, &m, OLD_LOSS_EPS);
        let h = 1e-6;
        for j in 0..2 {
            let mut p = post;
            p[j] += h;
            let up = term(LossVariant::Old, &pre, &p, &tgt, &m, OLD_LOSS_EPS).value;
            p[j] -= 2.0 * h;
            let dn = term(LossVariant::Old, &pre, &p, &tgt, &m, OLD_LOSS_EPS).value;
            assert!(((up - dn) / (2.0 * h) - t.d_post[j]).abs() < 1e-6);
        }
    }
}
