//! Benchmarks for the hot paths: raw matmul kernels, a full model forward,
//! and the adjacency-score metric.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use cnpe_core::analysis::{adjacency_score, cosine_sim_matrix, synthetic_banded_matrix, BandProfile};
use cnpe_core::model::{Model, ModelConfig};
use cnpe_core::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (m, k, n) = (128, 128, 512);
    let a = Tensor::randn(vec![m, k], 0.0, 1.0, &mut rng);
    let bt_nn = Tensor::randn(vec![k, n], 0.0, 1.0, &mut rng);
    let bt_nt = Tensor::randn(vec![n, k], 0.0, 1.0, &mut rng);
    let bt_tn = Tensor::randn(vec![m, n], 0.0, 1.0, &mut rng);

    let mut group = c.benchmark_group("matmul_128x128x512");
    group.throughput(Throughput::Elements((2 * m * k * n) as u64));
    group.bench_function("nn", |b| {
        b.iter_batched_ref(
            || vec![0.0f32; m * n],
            |out| matmul_nn(black_box(a.data()), black_box(bt_nn.data()), m, k, n, out),
            BatchSize::LargeInput,
        )
    });
    group.bench_function("nt", |b| {
        b.iter_batched_ref(
            || vec![0.0f32; m * n],
            |out| matmul_nt(black_box(a.data()), black_box(bt_nt.data()), m, k, n, out),
            BatchSize::LargeInput,
        )
    });
    group.bench_function("tn", |b| {
        b.iter_batched_ref(
            || vec![0.0f32; k * n],
            |out| matmul_tn(black_box(a.data()), black_box(bt_tn.data()), m, k, n, out),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let config = ModelConfig::desk(25, 64);
    let model = Model::init(config, 0).unwrap();
    let tokens: Vec<usize> = (0..22).map(|i| (i * 7 + 3) % 25).collect();

    c.bench_function("forward_4l_128d_seq22", |b| {
        b.iter(|| model.forward(black_box(&tokens)).unwrap())
    });
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let acts = Tensor::randn(vec![22, 128], 0.0, 1.0, &mut rng);
    let banded = synthetic_banded_matrix(64, BandProfile::Band, 0).unwrap();

    c.bench_function("cosine_sim_matrix_22x128", |b| {
        b.iter(|| cosine_sim_matrix(black_box(&acts)).unwrap())
    });
    c.bench_function("adjacency_score_64x64", |b| {
        b.iter(|| adjacency_score(black_box(&banded), true).unwrap())
    });
}

criterion_group!(benches, bench_matmul, bench_forward, bench_metrics);
criterion_main!(benches);
