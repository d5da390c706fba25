use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use picr_core::metrics::{f_measure_max, mae, s_measure};
use picr_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let (a, b) = (random(&[n, n], 1), random(&[n, n], 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let tape = Tape::new();
                let y = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
                black_box(y.value());
            })
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let x = random(&[16, 64, 64], 3);
    let w = random(&[16, 16, 3, 3], 4);
    c.bench_function("conv2d 16x64x64 k3 forward+backward", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let xv = tape.param(x.clone());
            let y = xv.conv2d(tape.param(w.clone()), None, 1, 1).unwrap();
            black_box(tape.backward(y.sum()).unwrap());
        })
    });
}

fn softmax(c: &mut Criterion) {
    let x = random(&[256, 64], 5);
    c.bench_function("softmax 256x64", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            black_box(tape.constant(x.clone()).softmax().value());
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s: Tensor<f32> = Tensor::from_fn([224, 224], |_| rng.random());
    let g: Tensor<f32> = Tensor::from_fn([224, 224], |i| if (i / 224) % 50 < 20 { 1.0 } else { 0.0 });
    c.bench_function("mae 224", |b| b.iter(|| mae(black_box(&s), &g).unwrap()));
    c.bench_function("f_measure_max 224", |b| b.iter(|| f_measure_max(black_box(&s), &g).unwrap()));
    c.bench_function("s_measure 224", |b| b.iter(|| s_measure(black_box(&s), &g).unwrap()));
}

criterion_group!(benches, matmul, conv, softmax, metrics);
criterion_main!(benches);
