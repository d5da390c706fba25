use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use picr_core::config::Config;
use picr_core::data::synthetic_dataset;
use picr_core::encoder::{preprocess_depth, FeatureMap};
use picr_core::loss::total_loss;
use picr_core::model::PicrNet;
use picr_core::nn::{ParamBuilder, ParamStore};
use picr_core::Tape;
use picr_core::cmpi::CmpiStage;
use picr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cmpi_stage(c: &mut Criterion) {
    let cfg = Config::toy().model;
    let mut group = c.benchmark_group("cmpi stage1");
    for k in [1, 3] {
        let mut m = cfg.clone();
        m.cmpi_window = k;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let st = CmpiStage::build(&mut ParamBuilder::new(&mut store, &mut rng), "cmpi", &m, 0).unwrap();
        let f: Tensor<f32> = Tensor::from_fn([256, 16], |_| rng.random_range(-1.0..1.0));
        group.bench_function(format!("k{k} 16x16 grid"), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let p = store.bind(&tape);
                let fr = FeatureMap { tokens: tape.constant(f.clone()), grid: (16, 16) };
                let fd = FeatureMap { tokens: tape.constant(f.clone()), grid: (16, 16) };
                black_box(st.forward(&p, fr, fd, None).unwrap().tokens.value());
            })
        });
    }
    group.finish();
}

fn toy_model(c: &mut Criterion) {
    let cfg = Config::toy();
    let (net, store) = PicrNet::build(&cfg.model, 0).unwrap();
    let sample = &synthetic_dataset(1, 0, 64).unwrap()[0];
    let depth = preprocess_depth(&sample.depth).unwrap();
    let mut group = c.benchmark_group("toy model");
    group.sample_size(10);
    group.bench_function("forward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let pred = net.forward(&p, tape.constant(sample.rgb.clone()), tape.constant(depth.clone())).unwrap();
            black_box(pred.out.value());
        })
    });
    group.bench_function("forward+backward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let pred = net.forward(&p, tape.constant(sample.rgb.clone()), tape.constant(depth.clone())).unwrap();
            let (loss, _) = total_loss(&pred.sides, pred.out, &sample.gt).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
    group.finish();
}

criterion_group!(benches, cmpi_stage, toy_model);
criterion_main!(benches);
