//! Benchmarks of the hot paths: residual/Jacobian assembly, LM iterations,
//! pyramid construction, and frame rendering.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use surfel_track_bench::{bench_scene, photometric_fixture};
use surfel_track_core::optimizer::{lm_solve, LmConfig, NlsProblem};
use surfel_track_core::photometric::{photometric_residuals, residual_jacobian, ActiveParams};
use surfel_track_core::synth::render_frame;
use surfel_track_core::{ImagePyramid, Pose};

fn photometric(c: &mut Criterion) {
    let fx = photometric_fixture(1);
    c.bench_function("photometric_residuals_15x15", |b| {
        b.iter(|| {
            black_box(photometric_residuals(
                &fx.surfel, &fx.state, &fx.pose, &fx.image, &fx.k, 0, 0.24,
            ))
        })
    });
    c.bench_function("residual_jacobian_all_blocks_15x15", |b| {
        b.iter(|| {
            black_box(residual_jacobian(
                &fx.surfel,
                &fx.state,
                &fx.pose,
                &fx.image,
                &fx.k,
                0,
                ActiveParams::ALL,
                0.24,
            ))
        })
    });
}

struct Rosenbrock;

impl NlsProblem for Rosenbrock {
    fn tangent_dim(&self) -> usize {
        2
    }
    fn residuals(&self, x: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])
    }
    fn jacobian(&self, x: &nalgebra::DVector<f64>) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0])
    }
    fn apply_increment(
        &self,
        x: &nalgebra::DVector<f64>,
        dx: &nalgebra::DVector<f64>,
    ) -> nalgebra::DVector<f64> {
        x + dx
    }
}

fn solver(c: &mut Criterion) {
    c.bench_function("lm_rosenbrock", |b| {
        b.iter(|| {
            black_box(lm_solve(
                &Rosenbrock,
                nalgebra::DVector::from_vec(vec![-1.2, 1.0]),
                &LmConfig::default(),
            ))
        })
    });
}

fn imaging(c: &mut Criterion) {
    let scene = bench_scene(2);
    let pose = Pose::identity();
    c.bench_function("render_frame_320x240", |b| {
        b.iter(|| {
            black_box(render_frame(
                &scene,
                7.0,
                &pose,
                &scene.intrinsics,
                (320, 240),
            ))
        })
    });
    let (image, _) = render_frame(&scene, 0.0, &pose, &scene.intrinsics, (640, 480));
    c.bench_function("build_pyramid_640x480_3_levels", |b| {
        b.iter(|| black_box(ImagePyramid::build(image.clone(), 3).unwrap()))
    });
}

criterion_group!(benches, photometric, solver, imaging);
criterion_main!(benches);
