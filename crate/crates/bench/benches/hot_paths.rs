use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;
use urpa_bench::Fixture;
use urpa_core::experiment::evaluate;
use urpa_core::grpo::{compute_advantages, surrogate_objective};
use urpa_core::policy::{grad_logprob, sample_response};
use urpa_core::rewards::source_reward;
use urpa_core::rng;
use urpa_core::urpa::build_pseudo_label;
use urpa_core::{tiou, TimeInterval};

criterion_group!(benches, interval, advantages, rollouts, gradients, pseudo_labels, evaluation);
criterion_main!(benches);

fn interval(c: &mut Criterion) {
    let a = TimeInterval::new(0.21, 0.64).unwrap();
    let b = TimeInterval::new(0.35, 0.90).unwrap();
    c.bench_function("tiou", |bch| bch.iter(|| tiou(black_box(&a), black_box(&b))));
}

fn advantages(c: &mut Criterion) {
    let rewards = [0.1, 0.55, 0.9, 0.5, 0.0, 0.73, 0.62, 0.5];
    c.bench_function("advantages G=8", |b| {
        b.iter(|| compute_advantages(black_box(&rewards), 1e-8))
    });
}

fn rollouts(c: &mut Criterion) {
    let f = Fixture::new(4, 8);
    let sample = &f.samples[0];
    let gt = sample.gt_interval.unwrap();
    let mut r = rng::stream(11, &[0]);
    c.bench_function("sample and score one rollout", |b| {
        b.iter(|| {
            let resp = sample_response(&f.snapshot, sample, &mut r);
            source_reward(&resp.rendered, &gt, &f.reward).unwrap()
        })
    });
}

fn gradients(c: &mut Criterion) {
    let f = Fixture::new(4, 8);
    let ctx = f.context();
    let tokens = &f.group.responses[0].tokens;
    c.bench_function("log-prob gradient", |b| {
        b.iter(|| grad_logprob(&f.snapshot.current, black_box(&ctx), tokens))
    });
    c.bench_function("surrogate G=8", |b| {
        b.iter(|| surrogate_objective(&f.snapshot, &ctx, &f.group, 0.04, None))
    });
}

fn pseudo_labels(c: &mut Criterion) {
    let f = Fixture::new(4, 8);
    c.bench_function("pseudo label G=8", |b| {
        b.iter_batched(
            || rng::stream(13, &[0]),
            |mut r| build_pseudo_label(&f.snapshot, &f.samples[1], 8, 10.0, &mut r),
            BatchSize::SmallInput,
        )
    });
}

fn evaluation(c: &mut Criterion) {
    let f = Fixture::new(100, 8);
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(20);
    group.bench_function("100 samples", |b| {
        b.iter(|| evaluate(&f.snapshot.current, &f.samples, 0).unwrap())
    });
    group.finish();
}
