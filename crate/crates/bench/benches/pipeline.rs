use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use tmeseg_bench::{bundle, slide_mask};
use tmeseg_core::aggregator::{aggregate, AggregatorConfig};
use tmeseg_core::tiling::{aggregate_tiled, worker_pool, TilePlan};
use tmeseg_core::tme::slide_metrics;
use tmeseg_core::Taxonomy;

fn full_frame(c: &mut Criterion) {
    let tax = Taxonomy::builtin();
    let cfg = AggregatorConfig::default();
    let mut g = c.benchmark_group("aggregate");
    g.sample_size(10);
    for (size, nuclei) in [(256, 60), (1024, 900)] {
        let b = bundle(size, nuclei, 17);
        g.bench_with_input(BenchmarkId::from_parameter(size), &b, |bench, b| bench.iter(|| aggregate(black_box(b), tax, &cfg)));
    }
    g.finish();
}

fn tiled(c: &mut Criterion) {
    let tax = Taxonomy::builtin();
    let cfg = AggregatorConfig::default();
    let plan = TilePlan::default();
    let b = bundle(1024, 900, 17);
    let mut g = c.benchmark_group("aggregate_tiled/1024");
    g.sample_size(10);
    for workers in [1, 4] {
        let pool = worker_pool(Some(workers)).expect("pool");
        g.bench_function(BenchmarkId::from_parameter(workers), |bench| {
            bench.iter(|| pool.install(|| aggregate_tiled(black_box(&b), tax, &cfg, &plan)))
        });
    }
    g.finish();
}

fn tme(c: &mut Criterion) {
    let m = slide_mask(1024);
    let mut g = c.benchmark_group("slide_metrics");
    g.sample_size(10);
    g.bench_function("1024", |b| b.iter(|| slide_metrics(black_box(&m), 0.5, 50.0)));
    g.finish();
}

criterion_group!(pipeline, full_frame, tiled, tme);
criterion_main!(pipeline);
