//! Benchmarks for the forward pipeline: convolution throughput, pair
//! forward/backward, group inference scaling, and dataset evaluation.

use cafcn_bench::{bench_images, bench_params};
use cafcn_core::metrics::{evaluate_dataset, GroundTruthMask};
use cafcn_core::network::{forward_backward_pair, forward_pair, infer_group, NetworkConfig};
use cafcn_core::tensor::{conv2d, ConvKernel, Tensor};
use cafcn_core::training::LossConfig;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn conv_throughput(c: &mut Criterion) {
    let x = Tensor::filled(&[32, 32, 16], 0.5);
    let k = ConvKernel::new(Tensor::filled(&[3, 3, 16, 16], 0.01), vec![0.0; 16], 1).unwrap();
    c.bench_function("conv2d_3x3_32x32x16", |b| {
        b.iter(|| conv2d(black_box(&x), black_box(&k), 1).unwrap())
    });
}

fn pair_passes(c: &mut Criterion) {
    let config = NetworkConfig::default();
    let params = bench_params(&config);
    let images = bench_images(&config, 2);
    c.bench_function("forward_pair_32x32", |b| {
        b.iter(|| forward_pair(black_box(&images[0]), black_box(&images[1]), &params).unwrap())
    });

    let mask = GroundTruthMask::new(32, 32, (0..32 * 32).map(|i| (i % 7 == 0) as u8).collect())
        .unwrap();
    let loss_cfg = LossConfig::default();
    c.bench_function("forward_backward_pair_32x32", |b| {
        b.iter(|| {
            forward_backward_pair(
                black_box(&images[0]),
                black_box(&images[1]),
                &mask,
                &mask,
                &params,
                &loss_cfg,
            )
            .unwrap()
        })
    });
}

fn group_scaling(c: &mut Criterion) {
    let config = NetworkConfig::default();
    let params = bench_params(&config);
    let images = bench_images(&config, 16);
    let mut group = c.benchmark_group("infer_group");
    for n in [2usize, 4, 8, 16] {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| infer_group(black_box(&images[..n]), &params).unwrap())
        });
    }
    group.finish();
}

fn metric_suite(c: &mut Criterion) {
    let config = NetworkConfig::default();
    let params = bench_params(&config);
    let images = bench_images(&config, 2);
    let (p1, p2) = forward_pair(&images[0], &images[1], &params).unwrap();
    let mask = GroundTruthMask::new(32, 32, (0..32 * 32).map(|i| (i % 5 == 0) as u8).collect())
        .unwrap();
    let pairs = vec![(p1, mask.clone()), (p2, mask)];
    c.bench_function("evaluate_dataset_2x32x32", |b| {
        b.iter(|| evaluate_dataset(black_box(&pairs)).unwrap())
    });
}

criterion_group!(benches, conv_throughput, pair_passes, group_scaling, metric_suite);
criterion_main!(benches);
