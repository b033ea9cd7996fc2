use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use kpanim_bench::{image_batch, small_config};
use kpanim_core::tensor::identity_grid;
use kpanim_core::trainer::Trainer;
use kpanim_core::{Graph, Tensor};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for (cin, cout, size) in [(3usize, 8usize, 64usize), (16, 32, 32), (64, 64, 8)] {
        let x = Tensor::from_fn(&[8, cin, size, size], |i| (i % 13) as f64 / 13.0);
        let w = Tensor::from_fn(&[cout, cin, 3, 3], |i| ((i % 7) as f64 - 3.0) / 10.0);
        let id = format!("{cin}->{cout}@{size}");
        group.bench_with_input(BenchmarkId::new("forward", &id), &(), |b, _| {
            b.iter(|| {
                let g = Graph::new();
                let y = g.conv2d(g.constant(x.clone()), g.constant(w.clone()), None, 1, 1).unwrap();
                black_box(g.value(y));
            })
        });
        group.bench_with_input(BenchmarkId::new("forward+backward", &id), &(), |b, _| {
            b.iter(|| {
                let g = Graph::new();
                let xv = g.param(x.clone());
                let wv = g.param(w.clone());
                let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
                black_box(g.backward(g.sum(y)).unwrap());
            })
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let x = image_batch(8, 64, 0);
    let grid = identity_grid(8, 64, 64).map(|v| v * 0.9 + 0.01);
    c.bench_function("grid_sample 8x3x64x64", |b| {
        b.iter(|| {
            let g = Graph::new();
            let y = g.grid_sample(g.param(x.clone()), g.param(grid.clone())).unwrap();
            black_box(g.backward(g.sum(y)).unwrap());
        })
    });
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let src = image_batch(8, 64, 1);
    let drv = image_batch(8, 64, 2);
    let mut trainer = Trainer::new(small_config(4)).unwrap();
    group.bench_function("batch 8, 64x64, K=4, width 8", |b| {
        b.iter(|| black_box(trainer.train_step(src.clone(), drv.clone(), 2e-4).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, conv, sampling, train_step);
criterion_main!(benches);
