use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use njode::baselines::{pf_init, DensityEval, Transition};
use njode::datasets::{generate, GenerationConfig, ModelSpec};
use njode::model::{forward_batch, train, Architecture, NjodeParams, TrainConfig};
use njode::nn::Activation;
use njode::signature::{chen_concat, signature_of_interpolated_path, signature_of_segment};

const DRIFT: ModelSpec = ModelSpec::BMDrift {
    x0: 0.0,
    sigma: 0.2,
    a: 0.05,
    b: 0.1,
};

fn signatures(c: &mut Criterion) {
    let a = signature_of_segment(&[0.3, -0.2], 3).unwrap();
    let b = signature_of_segment(&[-0.1, 0.4], 3).unwrap();
    c.bench_function("chen_concat d=2 m=3", |bench| {
        bench.iter(|| chen_concat(black_box(&a), black_box(&b)).unwrap())
    });
    let (train_set, _, _) = generate(&DRIFT, &GenerationConfig::new(10, 0, 1)).unwrap();
    let sample = &train_set.samples[0];
    c.bench_function("interpolated path signature m=3", |bench| {
        bench.iter(|| signature_of_interpolated_path(black_box(sample), 1.0, 3, &[0.0]).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let (train_set, val_set, _) = generate(&DRIFT, &GenerationConfig::new(250, 0, 1)).unwrap();
    let arch = Architecture::new(train_set.dims(), 100, Activation::Tanh);
    let params = NjodeParams::init(arch, 7).unwrap();
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("forward 200 paths d_h=100", |bench| {
        bench.iter(|| forward_batch(black_box(&params), &train_set.samples, false).unwrap())
    });
    let cfg = TrainConfig::new(1, 3);
    group.bench_function("train epoch 200 paths d_h=100", |bench| {
        bench.iter(|| train(&params, &train_set.samples, &val_set.samples, &cfg).unwrap())
    });
    group.finish();
}

fn particle_filter(c: &mut Criterion) {
    let cir = ModelSpec::CIRUncertain {
        x0: 1.0,
        a_min: 2.0,
        a_max: 3.0,
        b_min: 1.0,
        b_max: 2.0,
        sigma_min: 1.0,
        sigma_max: 2.0,
        w: None,
        strict_positivity: false,
    };
    let tr = Transition {
        t_prev: 0.2,
        x_prev: 1.1,
        t: 0.3,
        x: 1.3,
    };
    let ps = pf_init(&cir, 1000, 5).unwrap();
    c.bench_function("cir pf update 1000 particles", |bench| {
        bench.iter_batched(
            || ps.clone(),
            |mut ps| ps.update(&cir, &tr, DensityEval::LogSpace).unwrap(),
            criterion::BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, signatures, model, particle_filter);
criterion_main!(benches);
