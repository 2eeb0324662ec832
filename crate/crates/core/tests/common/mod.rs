#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use njode::datasets::{generate, Dataset, GenerationConfig, ModelSpec};
use njode::{Dims, ObservationPattern, PathSample, TimeGrid};

pub const DRIFT: ModelSpec = ModelSpec::BMDrift {
    x0: 0.0,
    sigma: 0.2,
    a: 0.05,
    b: 0.1,
};

/// Truncated signature of a path given by its values at `points`, computed
/// by trapezoidal iterated integration on a refinement with `steps`
/// sub-steps per segment. Levels are flattened in lexicographic order,
/// level 0 first.
pub fn quadrature_signature(points: &[Vec<f64>], level: usize, steps: usize) -> Vec<f64> {
    let d = points[0].len();
    // levels[k] holds the running level-k integrals
    let mut levels: Vec<Vec<f64>> = (0..=level).map(|k| vec![0.0; d.pow(k as u32)]).collect();
    levels[0][0] = 1.0;
    for w in points.windows(2) {
        let dx: Vec<f64> = (0..d).map(|j| (w[1][j] - w[0][j]) / steps as f64).collect();
        for _ in 0..steps {
            let before = levels.clone();
            for k in 1..=level {
                let lower = d.pow(k as u32 - 1);
                for idx in 0..lower {
                    // trapezoid: average of the lower level before and after
                    // the step; the after value is known up to this order
                    for (j, dxj) in dx.iter().enumerate() {
                        let avg = 0.5 * (before[k - 1][idx] + levels[k - 1][idx]);
                        levels[k][idx * d + j] += avg * dxj;
                    }
                }
            }
        }
    }
    levels.concat()
}

/// Sample on a uniform grid with every listed grid index observed.
pub fn sample_from(
    horizon: f64,
    n_steps: usize,
    u: Array2<f64>,
    v: Array2<f64>,
    obs: Vec<usize>,
    masks: Vec<Vec<bool>>,
) -> PathSample {
    let grid = Arc::new(TimeGrid::uniform(horizon, n_steps).unwrap());
    let dims = Dims::new(u.ncols(), v.ncols());
    let pattern = ObservationPattern::new(obs, masks, dims).unwrap();
    PathSample::new(grid, u, v, pattern, BTreeMap::new()).unwrap()
}

pub fn drift_data(n_paths: usize, seed: u64) -> (Dataset, Dataset) {
    let (train, val, _) = generate(&DRIFT, &GenerationConfig::new(n_paths, 0, seed)).unwrap();
    (train, val)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}
