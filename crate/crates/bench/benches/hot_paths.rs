//! Benchmarks for the numerical hot paths: Gram assembly, the joint-density
//! gradient, a leapfrog trajectory, the quadrature kernel, and density grids.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::{DMatrix, DVector};
use std::hint::black_box;

use deepgp_core::analysis::{self, GridConfig};
use deepgp_core::deepgp::{self, two_layer_add_rbf, WhitenedState};
use deepgp_core::kernels::{self, KernelSpec};
use deepgp_core::seed;

fn setup(n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = seed::rng(1);
    use rand::Rng;
    let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let y = DVector::from_fn(n, |i, _| (x[(i, 0)] * 3.0).sin());
    (x, y)
}

fn bench_gram(c: &mut Criterion) {
    let (x, _) = setup(100);
    let rows = kernels::matrix_rows(&x);
    let spec = KernelSpec::unit_rbf();
    c.bench_function("gram_rbf_100", |b| {
        b.iter(|| kernels::gram(black_box(&spec), black_box(&rows), 1e-4).unwrap())
    });
}

fn bench_log_joint_grad(c: &mut Criterion) {
    let (x, y) = setup(75);
    let arch = two_layer_add_rbf(1, 2, 1.0, 1.0, 1.0, 1.0, 0.05).unwrap();
    let mut rng = seed::rng(2);
    let state = WhitenedState::standard_normal(&arch, 75, &mut rng);
    c.bench_function("log_joint_grad_n75_w2", |b| {
        b.iter(|| deepgp::log_joint_with_grad(black_box(&arch), &x, &y, &state).unwrap())
    });
}

fn bench_leapfrog(c: &mut Criterion) {
    let dim = 225;
    let mut grad = |q: &[f64]| Some(q.iter().map(|v| -v).collect::<Vec<_>>());
    c.bench_function("leapfrog_gaussian_225d_32steps", |b| {
        b.iter_batched(
            || (vec![0.1; dim], vec![0.0; dim]),
            |(mut q, mut p)| {
                deepgp_core::inference::leapfrog(&mut grad, &mut q, &mut p, 0.05, 32);
                q
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_quadrature_kernel(c: &mut Criterion) {
    c.bench_function("finite_3layer_quadrature_h2_11nodes", |b| {
        b.iter(|| {
            kernels::finite_3layer_quadrature(
                black_box(&[-0.5]),
                black_box(&[0.5]),
                2,
                1.0,
                1.0,
                1.0,
                1.0,
                1.0,
                1.0,
                11,
            )
            .unwrap()
        })
    });
}

fn bench_density_grid(c: &mut Criterion) {
    let arch = deepgp_core::deepgp::matched_two_layer(1, 2, 1.0).unwrap();
    c.bench_function("density_grid_w2_7nodes", |b| {
        b.iter(|| {
            analysis::density_grid(
                black_box(&arch),
                &[-0.5],
                &[0.5],
                &GridConfig::default(),
                7,
                0,
            )
            .unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_gram,
    bench_log_joint_grad,
    bench_leapfrog,
    bench_quadrature_kernel,
    bench_density_grid
);
criterion_main!(benches);
