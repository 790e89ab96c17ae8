//! Criterion benches for the data-parallel kernels. Every benchmark id
//! embeds the compiled execution mode, so running
//!
//! ```text
//! cargo bench -p anl
//! cargo bench -p anl --no-default-features
//! ```
//!
//! produces directly comparable `parallel/...` and `sequential/...` entries
//! in the same criterion report.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::Rng;

use anl::cluster::{dbscan, select_eps};
use anl::eval::{cmc_map, RetrievalMeta};
use anl::fda::{build_neighbor_sets, contrastive_loss_grad, similarity_targets, MemoryBank};
use anl::math::{pairwise_distance, Mat64, Metric};
use anl::nn::{Activation, DenseNet};
use anl::par::MODE;
use anl::rng::component_rng;

fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat64 {
    let mut rng = component_rng(seed, 0xBE9C);
    Mat64::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn bench_pairwise_distance(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("{}/pairwise_distance", MODE));
    for &n in &[128usize, 512] {
        let x = random_mat(n, 32, 1).normalized_rows().unwrap();
        group.throughput(Throughput::Elements((n * n) as u64));
        group.bench_with_input(BenchmarkId::new("cosine", n), &x, |b, x| {
            b.iter(|| pairwise_distance(black_box(x), Metric::CosineDist).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("euclidean", n), &x, |b, x| {
            b.iter(|| pairwise_distance(black_box(x), Metric::Euclidean).unwrap())
        });
    }
    group.finish();
}

fn bench_encoder_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("{}/encoder_forward", MODE));
    let mut rng = component_rng(2, 0xBE9C);
    let net = DenseNet::new(
        32,
        &[(64, Activation::Relu), (32, Activation::Identity)],
        &mut rng,
    )
    .unwrap();
    for &n in &[64usize, 512] {
        let x = random_mat(n, 32, 3);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| {
            b.iter(|| net.infer(black_box(x)).unwrap())
        });
    }
    group.finish();
}

fn bench_contrastive(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("{}/contrastive_loss_grad", MODE));
    let n = 512;
    let dim = 32;
    let anchors = random_mat(n, dim, 4).normalized_rows().unwrap();
    let bank = MemoryBank::init(&random_mat(n, dim, 5)).unwrap();
    let mut rng = component_rng(6, 0xBE9C);
    let cams: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let sets = build_neighbor_sets(&anchors, &bank, &cams, 2, 4).unwrap();
    let targets = similarity_targets(&anchors, &bank, &sets).unwrap();
    for &batch in &[64usize, 256] {
        let indices: Vec<usize> = (0..batch).map(|i| (i * 2) % n).collect();
        let embeddings = anchors.select_rows(&indices).unwrap();
        group.throughput(Throughput::Elements(batch as u64));
        group.bench_with_input(
            BenchmarkId::from_parameter(batch),
            &(embeddings, indices),
            |b, (e, idx)| {
                b.iter(|| contrastive_loss_grad(black_box(e), idx, &bank, &targets, 0.05).unwrap())
            },
        );
    }
    group.finish();
}

fn bench_dbscan(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("{}/dbscan", MODE));
    for &n in &[128usize, 512] {
        let x = random_mat(n, 8, 7).normalized_rows().unwrap();
        let dist = pairwise_distance(&x, Metric::CosineDist).unwrap();
        let eps = select_eps(&dist, 0.02).unwrap();
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &dist, |b, d| {
            b.iter(|| dbscan(black_box(d), eps, 4).unwrap())
        });
    }
    group.finish();
}

fn bench_cmc_map(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("{}/cmc_map", MODE));
    let mut rng = component_rng(8, 0xBE9C);
    for &(nq, ng) in &[(60usize, 180usize), (120, 360)] {
        let q = random_mat(nq, 32, 9);
        let g = random_mat(ng, 32, 10);
        let qmeta: Vec<RetrievalMeta> = (0..nq)
            .map(|i| RetrievalMeta {
                identity: i % 30,
                camera: rng.random_range(0..4),
            })
            .collect();
        let gmeta: Vec<RetrievalMeta> = (0..ng)
            .map(|i| RetrievalMeta {
                identity: i % 30,
                camera: rng.random_range(0..4),
            })
            .collect();
        group.throughput(Throughput::Elements(nq as u64));
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{}q_{}g", nq, ng)),
            &(q, g),
            |b, (q, g)| b.iter(|| cmc_map(black_box(q), &qmeta, black_box(g), &gmeta).unwrap()),
        );
    }
    group.finish();
}

criterion_group!(
    kernels,
    bench_pairwise_distance,
    bench_encoder_forward,
    bench_contrastive,
    bench_dbscan,
    bench_cmc_map
);
criterion_main!(kernels);
