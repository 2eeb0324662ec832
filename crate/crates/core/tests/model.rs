mod common;

use ndarray::Array2;
use njode::datasets::{generate, GenerationConfig};
use njode::model::{
    forward_path, loss_gradient, predict_online, train, Architecture, Mode, NjodeParams,
    ObservationEvent, TrainConfig,
};
use njode::nn::Activation;
use njode::{Dims, LossVariant, PathSample};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(dims: Dims, seed: u64) -> NjodeParams {
    let mut arch = Architecture::new(dims, 12, Activation::Tanh);
    arch.hidden_width = 16;
    NjodeParams::init(arch, seed).unwrap()
}

fn drift_paths(n: usize, seed: u64) -> Vec<PathSample> {
    common::drift_data(n, seed).0.samples
}

fn events_of(s: &PathSample) -> Vec<ObservationEvent> {
    (0..s.n_obs())
        .map(|i| ObservationEvent {
            time: s.obs_time(i),
            values: s.obs_u(i).to_vec(),
            mask: s.pattern().input_mask(i).to_vec(),
        })
        .collect()
}

fn assert_rows_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{what}: {x} vs {y}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn online_matches_offline(data_seed in any::<u64>(), model_seed in 0u64..1000) {
        let s = &drift_paths(1, data_seed)[0];
        let params = small_model(s.dims(), model_seed);
        let offline = forward_path(&params, s, Mode::Eval).unwrap();
        let times = s.grid().times().to_vec();
        let online =
            predict_online(&params, s.shared_grid().clone(), &events_of(s), &times).unwrap();
        for (k, row) in online.iter().enumerate() {
            for (x, y) in row.iter().zip(offline.g.row(k)) {
                prop_assert!((x - y).abs() <= 1e-10, "grid index {}: {} vs {}", k, x, y);
            }
        }
    }

    #[test]
    fn outputs_are_adapted(data_seed in any::<u64>(), cutoff in 0.0f64..1.0) {
        let s = &drift_paths(1, data_seed)[0];
        let params = small_model(s.dims(), 1);
        let full = forward_path(&params, s, Mode::Eval).unwrap();
        let cut = forward_path(&params, &s.observed_until(cutoff), Mode::Eval).unwrap();
        let last = s.grid().floor_index(cutoff).unwrap();
        for k in 0..=last {
            prop_assert_eq!(full.g.row(k), cut.g.row(k));
        }
    }
}

#[test]
fn left_limits_are_the_unjumped_state() {
    let params = small_model(Dims::new(1, 1), 2);
    for s in drift_paths(5, 3) {
        let trace = forward_path(&params, &s, Mode::Eval).unwrap();
        let dt = s.grid().dt();
        for (i, &k) in s.pattern().obs_indices().iter().enumerate().skip(1) {
            // without the observation at k the model only follows the ODE
            let before = forward_path(
                &params,
                &s.observed_until(s.grid().times()[k] - 0.5 * dt),
                Mode::Eval,
            )
            .unwrap();
            let pre = trace.left_limit(k);
            assert_eq!(pre, trace.pre.row(i).to_vec());
            assert_rows_close(&pre, &before.g.row(k).to_vec(), 1e-12, "left limit");
            assert_eq!(trace.post.row(i), trace.g.row(k));
        }
    }
}

/// Ten-step path with observations at 0, 3, 7 and 10.
fn short_path(seed: u64) -> PathSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Array2::from_shape_fn((11, 1), |_| rng.random_range(-1.0..1.0));
    let v = u.clone();
    common::sample_from(1.0, 10, u, v, vec![0, 3, 7, 10], vec![vec![true, true]; 4])
}

fn check_loss_gradient(params: &mut NjodeParams, samples: &[PathSample], variant: LossVariant) {
    let eps = 1e-10;
    let (_, grads) = loss_gradient(params, samples, variant, eps).unwrap();
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ids: Vec<_> = params.store.ids().collect();
    let mut checked = 0;
    for &id in &ids {
        let (r, c) = params.store.get(id).dim();
        // every small tensor in full, a sample of the large ones
        let idx: Vec<(usize, usize)> = if r * c <= 20 {
            (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).collect()
        } else {
            (0..20)
                .map(|_| (rng.random_range(0..r), rng.random_range(0..c)))
                .collect()
        };
        for ij in idx {
            let orig = params.store.get(id)[ij];
            params.store.get_mut(id)[ij] = orig + h;
            let plus = loss_gradient(params, samples, variant, eps).unwrap().0;
            params.store.get_mut(id)[ij] = orig - h;
            let minus = loss_gradient(params, samples, variant, eps).unwrap().0;
            params.store.get_mut(id)[ij] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(id)[ij];
            assert!(
                (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()) + 1e-8,
                "{variant:?} {} {ij:?}: {analytic} vs {numeric}",
                params.store.name(id)
            );
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn loss_gradient_through_jumps_matches_finite_differences() {
    let samples: Vec<PathSample> = (0..3).map(short_path).collect();
    let mut params = small_model(Dims::new(1, 1), 4);
    check_loss_gradient(&mut params, &samples, LossVariant::Io);
    check_loss_gradient(&mut params, &samples, LossVariant::Old);

    // radius small enough that the clip is active
    let mut arch = params.arch.clone();
    arch.gamma_init = 0.05;
    let mut clipped = NjodeParams::init(arch, 5).unwrap();
    check_loss_gradient(&mut clipped, &samples, LossVariant::Io);
}

#[test]
fn short_training_reduces_the_loss() {
    let (train_set, val_set, _) =
        generate(&common::DRIFT, &GenerationConfig::new(50, 20, 8)).unwrap();
    let mut arch = Architecture::new(train_set.dims(), 20, Activation::Tanh);
    arch.hidden_width = 20;
    let params = NjodeParams::init(arch, 9).unwrap();
    let mut cfg = TrainConfig::new(20, 10);
    cfg.batch_size = 10;
    let out = train(&params, &train_set.samples, &val_set.samples, &cfg).unwrap();
    let first = out.history[0].val_loss;
    let last = out.history[20].val_loss;
    assert!(last < first, "validation loss {first} -> {last}");
    assert!(out.best_val_loss() <= last);
}

#[test]
fn masked_coordinates_do_not_enter_the_model() {
    let n = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = Array2::from_shape_fn((n + 1, 2), |_| rng.random_range(-1.0..1.0));
    let v = Array2::from_shape_fn((n + 1, 1), |_| rng.random_range(-1.0..1.0));
    let obs = vec![0, 5, 12, 20];
    let masks = vec![
        vec![true, true, true],
        vec![true, false, true],
        vec![false, true, false],
        vec![true, true, true],
    ];
    let s = common::sample_from(1.0, n, u.clone(), v.clone(), obs.clone(), masks.clone());
    let mut u2 = u;
    u2[[5, 1]] = 40.0;
    u2[[12, 0]] = -40.0;
    let s2 = common::sample_from(1.0, n, u2, v, obs, masks);
    let params = small_model(Dims::new(2, 1), 12);
    let a = forward_path(&params, &s, Mode::Eval).unwrap();
    let b = forward_path(&params, &s2, Mode::Eval).unwrap();
    assert_eq!(a.g, b.g);

    let times = s.grid().times().to_vec();
    let online = predict_online(&params, s.shared_grid().clone(), &events_of(&s2), &times).unwrap();
    for (k, row) in online.iter().enumerate() {
        assert_rows_close(row, &a.g.row(k).to_vec(), 1e-10, "online");
    }
}
