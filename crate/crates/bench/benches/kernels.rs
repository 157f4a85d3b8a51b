use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use tmeseg_bench::{blobs, rgb};
use tmeseg_core::raster::{
    connected_components, convex_hull, distance_band, gaussian_smooth, otsu_threshold, squared_distance_transform,
    Connectivity, Point,
};

fn blur(c: &mut Criterion) {
    let mut g = c.benchmark_group("gaussian_smooth");
    for size in [256, 1024] {
        let img = rgb(size);
        g.throughput(Throughput::Elements((size * size) as u64));
        g.bench_with_input(BenchmarkId::from_parameter(size), &img, |b, img| b.iter(|| gaussian_smooth(black_box(img), 2.0)));
    }
    g.finish();
}

fn otsu(c: &mut Criterion) {
    let gray = rgb(1024).grayscale();
    c.bench_function("otsu_threshold/1024", |b| b.iter(|| otsu_threshold(black_box(&gray))));
}

fn components(c: &mut Criterion) {
    let mut g = c.benchmark_group("connected_components");
    let m = blobs(1024);
    for conn in [Connectivity::Four, Connectivity::Eight] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{conn:?}")), &m, |b, m| {
            b.iter(|| connected_components(black_box(m), conn))
        });
    }
    g.finish();
}

fn edt(c: &mut Criterion) {
    let m = blobs(1024);
    c.bench_function("squared_distance_transform/1024", |b| b.iter(|| squared_distance_transform(black_box(&m))));
    c.bench_function("distance_band/1024", |b| b.iter(|| distance_band(black_box(&m), 50.0, 0.5)));
}

fn hull(c: &mut Criterion) {
    let pts: Vec<Point> = (0..4096i64).map(|i| Point::new((i * 37) % 211, (i * 53) % 197)).collect();
    c.bench_function("convex_hull/4096", |b| b.iter(|| convex_hull(black_box(&pts))));
}

criterion_group!(kernels, blur, otsu, components, edt, hull);
criterion_main!(kernels);
