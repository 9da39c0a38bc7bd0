use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use patchmerger::costmodel::{catalog, model_cost};
use patchmerger::merger::{merge, merge_backward};
use patchmerger::numcore::matmul;
use patchmerger::vit::cross_entropy;
use patchmerger_bench::{images, merger, tokens, toy_model};
use std::hint::black_box;

fn gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = tokens(n, n);
        let b = tokens(n, n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn merging(c: &mut Criterion) {
    let mut g = c.benchmark_group("merge");
    for n in [64, 196, 400] {
        let x = tokens(n, 64);
        let p = merger(64, 8);
        g.bench_with_input(BenchmarkId::new("forward", n), &n, |b, _| {
            b.iter(|| merge(black_box(&x), &p).unwrap())
        });
        let dy = tokens(8, 64);
        g.bench_with_input(BenchmarkId::new("backward", n), &n, |b, _| {
            b.iter(|| merge_backward(black_box(&x), &p, &dy).unwrap())
        });
    }
    g.finish();
}

fn toy_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("toy_train_step");
    g.sample_size(10);
    let x = images(32);
    let labels: Vec<usize> = (0..32).map(|i| i % 10).collect();
    for merged in [false, true] {
        let model = toy_model(merged);
        let name = if merged { "merger" } else { "baseline" };
        g.bench_function(name, |b| {
            b.iter(|| {
                let (logits, cache) = model.forward_cached(&x).unwrap();
                let (_, dl) = cross_entropy(&logits, &labels).unwrap();
                model.backward(&cache, &dl).unwrap()
            })
        });
    }
    g.finish();
}

fn costs(c: &mut Criterion) {
    let variants = catalog();
    c.bench_function("cost_catalog", |b| {
        b.iter(|| {
            for v in &variants {
                black_box(model_cost(&v.config).unwrap());
            }
        })
    });
}

criterion_group!(benches, gemm, merging, toy_step, costs);
criterion_main!(benches);
