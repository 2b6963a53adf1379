use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::Vector3;

use dpc_core::autodiff::{Graph, Precision, Tensor};
use dpc_core::datakit::{generate_synthetic, SyntheticSceneConfig};
use dpc_core::imaging::compute_flow;
use dpc_core::model::{assemble_input, init_params, predict, ModelConfig, SampleInput};
use dpc_core::warploss::warp;
use dpc_core::{exp_se3, log_se3, DepthMap, Pose, Twist};

fn geometry(c: &mut Criterion) {
    let xi = Twist::from_array([0.3, -0.1, 1.2, 0.02, 0.15, -0.01]);
    c.bench_function("exp_se3", |b| b.iter(|| exp_se3(black_box(&xi))));
    let p = exp_se3(&xi);
    c.bench_function("log_se3", |b| b.iter(|| log_se3(black_box(&p))));
}

fn imaging(c: &mut Criterion) {
    let seq = generate_synthetic(&SyntheticSceneConfig::plane(1, 2, 0.3, 6.0)).unwrap();
    let (src, tgt) = (&seq.images[0], &seq.images[1]);
    let k = seq.intrinsics;
    let depth = DepthMap::constant(k.height, k.width, 6.0).unwrap();
    let t = Pose::from_axis_angle(Vector3::y(), 0.01).with_translation(Vector3::new(0.05, 0.0, -0.3));
    c.bench_function("warp 96x128", |b| b.iter(|| warp(black_box(tgt), &depth, &t, &k).unwrap()));
    c.bench_function("flow 96x128", |b| b.iter(|| compute_flow(black_box(src), tgt).unwrap()));
}

fn conv(c: &mut Criterion) {
    let x = Tensor::filled(vec![4, 16, 48, 64], 0.1);
    let w = Tensor::filled(vec![32, 16, 3, 3], 0.01);
    let bias = Tensor::zeros(vec![32]);
    c.bench_function("conv2d forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new(Precision::Single);
            let (xv, wv, bv) = (g.param(&x), g.param(&w), g.param(&bias));
            let y = g.conv2d(xv, wv, bv, 2, 1).unwrap();
            let l = g.mean(y).unwrap();
            g.backward(l).unwrap();
            black_box(g.grad(wv))
        })
    });
}

fn model(c: &mut Criterion) {
    let seq = generate_synthetic(&SyntheticSceneConfig::plane(2, 3, 0.3, 6.0))
        .unwrap()
        .to_sequence_data("bench", 1)
        .unwrap();
    let cfg = ModelConfig::default();
    let params = init_params(0, &cfg).unwrap();
    let samples: Vec<SampleInput> = (0..2)
        .map(|t| SampleInput {
            source: &seq.frames[t],
            target: &seq.frames[t + 1],
            flow: &seq.flows[t],
            vo_twist: log_se3(&seq.vo[t]).unwrap(),
        })
        .collect();
    let input = assemble_input(&cfg, &samples).unwrap();
    c.bench_function("predict batch of 2", |b| b.iter(|| predict(&params, black_box(&input)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = geometry, imaging, conv, model
}
criterion_main!(benches);
