use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use stgin_bench::random_tensor;
use stgin_core::informer::attention::{full_attention, probsparse_attention, select_u};
use stgin_core::numerics::kernels::gemm_nn;

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm_nn");
    for n in [16, 32, 64, 128] {
        let a = random_tensor(1, &[n, n]);
        let b = random_tensor(2, &[n, n]);
        let mut out = vec![0.0; n * n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| {
                out.iter_mut().for_each(|v| *v = 0.0);
                gemm_nn(black_box(a.data()), black_box(b.data()), &mut out, n, n, n);
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    for l in [24, 96, 192] {
        let q = random_tensor(3, &[l, 32]);
        let k = random_tensor(4, &[l, 32]);
        let v = random_tensor(5, &[l, 32]);
        let u = select_u(l, 5.0);
        group.bench_with_input(BenchmarkId::new("full", l), &l, |bench, _| {
            bench.iter(|| full_attention(black_box(&q), &k, &v).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("probsparse", l), &l, |bench, _| {
            bench.iter(|| probsparse_attention(black_box(&q), &k, &v, u).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gemm, attention);
criterion_main!(benches);
