use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use getup_bench::{cloud, sparse_mask, uniform};
use getup_core::ascb::sparse_conv_layer;
use getup_core::geometry::{chamfer_distance, flatten, knn};
use getup_core::graph::Graph;
use getup_core::kernels::{conv2d_forward, Conv2dShape, Padding};
use getup_core::model::{prepare_frame, GetUp};
use getup_core::params::ParameterStore;
use getup_core::scene::{generate_scene, SceneSpec};
use getup_core::{RunConfig, Tensor};

fn conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_64x128");
    for (cin, cout, k) in [(3, 16, 3), (16, 16, 3), (4, 4, 11)] {
        let s = Conv2dShape::new(&[64, 128, cin], &[k, k, cin, cout], 1, Padding::Same).unwrap();
        let x = uniform(1, 64 * 128 * cin);
        let w = uniform(2, k * k * cin * cout);
        group.bench_function(BenchmarkId::from_parameter(format!("{cin}to{cout}_k{k}")), |b| {
            b.iter(|| conv2d_forward(black_box(&x), &w, None, &s))
        });
    }
    group.finish();
}

fn sparse_conv(c: &mut Criterion) {
    let x = Tensor::new(&[64, 128, 4], uniform(3, 64 * 128 * 4)).unwrap();
    let mask = sparse_mask(4, 64 * 128, 0.005);
    let k = Tensor::new(&[11, 11, 4, 4], uniform(5, 11 * 11 * 16)).unwrap();
    c.bench_function("sparse_conv_11x11_64x128", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
            sparse_conv_layer(&mut g, xv, black_box(&mask), kv).unwrap()
        })
    });
}

fn neighbours(c: &mut Criterion) {
    let mut group = c.benchmark_group("knn_k4");
    for n in [60, 300] {
        let rows = flatten(&cloud(6, n));
        group.bench_function(BenchmarkId::from_parameter(n), |b| b.iter(|| knn(black_box(&rows), 3, 4).unwrap()));
    }
    group.finish();
    let (a, b2) = (cloud(7, 128), cloud(8, 128));
    c.bench_function("chamfer_128x128", |b| b.iter(|| chamfer_distance(black_box(&a), &b2).unwrap()));
}

fn model_step(c: &mut Criterion) {
    let config = RunConfig::default();
    let scene = generate_scene(9, &SceneSpec { height: 64, width: 128, ..SceneSpec::default() }).unwrap();
    let frame = prepare_frame(&scene, &config).unwrap();
    let mut store = ParameterStore::new();
    let model = GetUp::new(&config, &mut store).unwrap();
    let mut group = c.benchmark_group("model_64x128");
    group.sample_size(10);
    group.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let loss = model.loss(&mut g, &store, black_box(&frame)).unwrap();
            g.gradients(loss.total).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, conv2d, sparse_conv, neighbours, model_step);
criterion_main!(benches);
