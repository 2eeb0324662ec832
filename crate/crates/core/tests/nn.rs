use ndarray::Array2;
use njode::model::{Architecture, NjodeParams};
use njode::nn::{
    gamma_clip, Activation, Adam, AdamConfig, BoundedNet, Gradients, Mlp, NodeId, ParamId,
    ParamStore, Tape,
};
use njode::Dims;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type NoRng = ChaCha8Rng;

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()) + 1e-8
}

/// `Σ c ⊙ net(x)` and its reverse-mode gradient.
fn objective(
    store: &ParamStore,
    x: &Array2<f64>,
    c: &Array2<f64>,
    net: &dyn Fn(&mut Tape<'_>, NodeId) -> NodeId,
) -> (f64, Gradients) {
    let mut tape = Tape::new(store);
    let input = tape.input(x.clone());
    let out = net(&mut tape, input);
    let value = (tape.value(out) * c).sum();
    let grads = tape.backward(vec![(out, c.clone())]).unwrap();
    (value, grads)
}

/// Compares `n_checks` randomly chosen parameter entries (all when `None`)
/// with central differences.
fn check_gradients(
    store: &mut ParamStore,
    x: &Array2<f64>,
    c: &Array2<f64>,
    net: &dyn Fn(&mut Tape<'_>, NodeId) -> NodeId,
    n_checks: Option<usize>,
    seed: u64,
) {
    let (_, grads) = objective(store, x, c, net);
    let h = 1e-5;
    let mut entries: Vec<(ParamId, (usize, usize))> = Vec::new();
    for id in store.ids() {
        let (r, k) = store.get(id).dim();
        for i in 0..r {
            for j in 0..k {
                entries.push((id, (i, j)));
            }
        }
    }
    if let Some(n) = n_checks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        entries = (0..n)
            .map(|_| entries[rng.random_range(0..entries.len())])
            .collect();
    }
    for (id, idx) in entries {
        let orig = store.get(id)[idx];
        store.get_mut(id)[idx] = orig + h;
        let plus = objective(store, x, c, net).0;
        store.get_mut(id)[idx] = orig - h;
        let minus = objective(store, x, c, net).0;
        store.get_mut(id)[idx] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get(id)[idx];
        assert!(
            close(analytic, numeric),
            "{} {idx:?}: reverse {analytic} vs finite difference {numeric}",
            store.name(id)
        );
    }
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
}

#[test]
fn two_layer_gradients_match_finite_differences() {
    for act in [Activation::Tanh, Activation::Relu] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let net = Mlp::new(&mut store, "net", &[4, 7, 3], act, &mut rng).unwrap();
        let x = random_matrix(5, 4, 1.0, &mut rng);
        let c = random_matrix(5, 3, 1.0, &mut rng);
        let f = |t: &mut Tape<'_>, i| net.forward_tape::<NoRng>(t, i, None).unwrap();
        check_gradients(&mut store, &x, &c, &f, None, 0);
    }
}

#[test]
fn clipped_output_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    // a small radius makes the clip active on most rows
    let net =
        BoundedNet::new(&mut store, "f", &[3, 6, 4], Activation::Tanh, 0.3, &mut rng).unwrap();
    let x = random_matrix(6, 3, 2.0, &mut rng);
    let c = random_matrix(6, 4, 1.0, &mut rng);
    let f = |t: &mut Tape<'_>, i| net.forward_tape::<NoRng>(t, i, None).unwrap();
    check_gradients(&mut store, &x, &c, &f, None, 0);
}

#[test]
fn experiment_network_shapes_have_correct_gradients() {
    for (d_h, act, d_v) in [
        (100, Activation::Tanh, 2),
        (100, Activation::Relu, 2),
        (200, Activation::Relu, 3),
        (200, Activation::Relu, 1),
    ] {
        let arch = Architecture::new(Dims::new(1, d_v), d_h, act);
        let params = NjodeParams::init(arch.clone(), 3).unwrap();
        let mut store = params.store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nets: [(&BoundedNet, usize, usize); 2] = [
            (&params.f_net, arch.drift_input_width().unwrap(), d_h),
            (&params.rho_net, arch.jump_input_width().unwrap(), d_h),
        ];
        for (net, width, out) in nets {
            let x = random_matrix(3, width, 1.0, &mut rng);
            let c = random_matrix(3, out, 1.0, &mut rng);
            let f = |t: &mut Tape<'_>, i| net.forward_tape::<NoRng>(t, i, None).unwrap();
            check_gradients(&mut store, &x, &c, &f, Some(150), d_h as u64);
        }
        let g = &params.g_net;
        let x = random_matrix(3, g.input_width(), 1.0, &mut rng);
        let c = random_matrix(3, g.output_width(), 1.0, &mut rng);
        let f = |t: &mut Tape<'_>, i| g.forward_tape::<NoRng>(t, i, None).unwrap();
        check_gradients(&mut store, &x, &c, &f, Some(150), 9);
    }
}

#[test]
fn adam_under_constant_gradient_moves_by_the_learning_rate() {
    let mut store = ParamStore::new();
    let w = store.add("w", Array2::zeros((1, 3)));
    let b = store.add(
        "b",
        Array2::from_shape_vec((1, 3), vec![0.0, 1.0, -2.0]).unwrap(),
    );
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(cfg, &store);
    let g = Array2::from_shape_vec((1, 3), vec![0.5, -3.0, 1e-3]).unwrap();
    let mut prev = store.get(b).clone();
    for step in 1..=1000 {
        // zero input, so the linear layer's output is b and d/db = g
        let grads = {
            let mut tape = Tape::new(&store);
            let x = tape.input(Array2::zeros((1, 1)));
            let out = tape.linear(x, w, b);
            tape.backward(vec![(out, g.clone())]).unwrap()
        };
        adam.step(&mut store, &grads).unwrap();
        if step == 1000 {
            let delta = store.get(b) - &prev;
            for (d, gi) in delta.iter().zip(&g) {
                assert!((d + cfg.lr * gi.signum()).abs() < 1e-3 * cfg.lr, "step {d}");
            }
        }
        prev = store.get(b).clone();
    }
    assert_eq!(adam.steps(), 1000);
    assert!(store.get(w).iter().all(|&x| x == 0.0));
}

#[test]
fn evaluation_forward_is_pure() {
    let arch = Architecture::new(Dims::new(1, 1), 20, Activation::Tanh);
    let params = NjodeParams::init(arch, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_matrix(4, params.f_net.inner.input_width(), 1.0, &mut rng);
    let a = params
        .f_net
        .forward::<NoRng>(&params.store, x.view(), None)
        .unwrap();
    let b = params
        .f_net
        .forward::<NoRng>(&params.store, x.view(), None)
        .unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn clip_stays_within_radius(
        x in prop::collection::vec(-1e6f64..1e6, 1..8),
        gamma in 1e-6f64..1e3,
    ) {
        let y = gamma_clip(&x, gamma);
        prop_assert!(norm(&y) <= gamma * (1.0 + 1e-12));
    }

    #[test]
    fn clip_is_two_lipschitz(
        pair in (1usize..6).prop_flat_map(|d| (
            prop::collection::vec(-10.0f64..10.0, d),
            prop::collection::vec(-10.0f64..10.0, d),
        )),
        gamma in 1e-3f64..20.0,
    ) {
        let (x, y) = pair;
        let gx = gamma_clip(&x, gamma);
        let gy = gamma_clip(&y, gamma);
        let diff: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a - b).collect();
        let dist: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        prop_assert!(norm(&diff) <= 2.0 * norm(&dist) + 1e-12);
    }
}
