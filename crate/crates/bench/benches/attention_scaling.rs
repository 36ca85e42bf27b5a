//! Runtime scaling of the linear attention kernel against the dense
//! softmax reference over a doubling grid of token counts. The linear kernel
//! should grow roughly in proportion to the tokens; the dense one roughly
//! quadratically.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;
use std::time::Duration;

use fuseseg::attention::{dense_softmax_attention, efficient_attention};
use fuseseg::numerics::Tensor;
use fuseseg::rng::SplitMix64;

const DIM: usize = 64;
const TOKEN_GRID: [usize; 4] = [256, 512, 1024, 2048];

fn qkv(n: usize) -> [Tensor<f32>; 3] {
    let mut rng = SplitMix64::for_tag(0, &format!("bench_{n}x{DIM}"));
    [(); 3].map(|_| Tensor::from_fn(vec![n, DIM], |_| rng.normal() as f32))
}

fn attention_scaling(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_scaling");
    group
        .sample_size(20)
        .warm_up_time(Duration::from_millis(300))
        .measurement_time(Duration::from_secs(2));
    for n in TOKEN_GRID {
        let [q, k, v] = qkv(n);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("efficient", n), &n, |b, _| {
            b.iter(|| black_box(efficient_attention(&q, &k, &v).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("dense", n), &n, |b, _| {
            b.iter(|| black_box(dense_softmax_attention(&q, &k, &v).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, attention_scaling);
criterion_main!(benches);
