use std::hint::black_box;

use cfrl_core::evaluation::{cf_metric, EvalConfig};
use cfrl_core::policy::{raw_tuples, train_baseline, FqiConfig, Method, Policy, TrainInputs};
use cfrl_core::preprocess::{estimate_marginals, fit_transition_mean, preprocess_with, MeanModelConfig};
use cfrl_core::{fqi, linear_env, sample_dataset};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn bench_preprocess(c: &mut Criterion) {
    let env = linear_env(1.0);
    let mut group = c.benchmark_group("preprocess");
    for n in [200, 1000, 2000] {
        let data = sample_dataset(&env, n, 10, 1).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &data, |b, data| {
            b.iter(|| {
                let mu = fit_transition_mean(data, &MeanModelConfig::default()).unwrap();
                let marginals = estimate_marginals(data).unwrap();
                black_box(preprocess_with(data, &mu, &marginals).unwrap())
            })
        });
    }
    group.finish();
}

fn bench_fqi(c: &mut Criterion) {
    let env = linear_env(1.0);
    let data = sample_dataset(&env, 1000, 10, 2).unwrap();
    let set = raw_tuples(&data, true, false).unwrap();
    c.bench_function("fqi/linear_full_n1000", |b| b.iter(|| black_box(fqi(&set, &FqiConfig::default()).unwrap())));
}

fn bench_cf_metric(c: &mut Criterion) {
    let env = linear_env(1.0);
    let data = sample_dataset(&env, 1000, 10, 3).unwrap();
    let inputs = TrainInputs { env: Some(&env), ..Default::default() };
    let eval = EvalConfig { n_subjects: 1000, ..EvalConfig::default() };
    let mut group = c.benchmark_group("cf_metric");
    group.sample_size(20);
    let full = train_baseline(Method::Full, &data, inputs, &FqiConfig::default()).unwrap();
    for (name, policy) in [("random", Policy::random(2, 1)), ("behavior", Policy::behavior(&env)), ("full", full)] {
        group.bench_function(name, |b| b.iter(|| black_box(cf_metric(&policy, &env, &eval).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, bench_preprocess, bench_fqi, bench_cf_metric);
criterion_main!(benches);
