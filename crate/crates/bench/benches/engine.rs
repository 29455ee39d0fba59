use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use posefuse_bench::{ik_case, qp_problem, scene};
use posefuse_core::assignment::min_cost_assignment;
use posefuse_core::{qp, replay, solve_ik, Feed, IkConfig, KeypointLabel, Pipeline, PipelineConfig};
use std::hint::black_box;

fn qp_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("qp");
    for (n, m) in [(10, 3), (26, 0), (30, 10)] {
        let p = qp_problem(n, m, 7);
        group.bench_with_input(BenchmarkId::new("solve", format!("{n}x{m}")), &p, |b, p| {
            b.iter(|| qp::solve(black_box(p), 1e-8, 200))
        });
    }
    group.finish();
}

fn kinematics(c: &mut Criterion) {
    let (model, q, _) = ik_case(1, 1);
    c.bench_function("forward_kinematics", |b| b.iter(|| model.forward_kinematics(black_box(q.as_slice()))));
    c.bench_function("jacobian", |b| b.iter(|| model.jacobian(black_box(q.as_slice()), &KeypointLabel::ALL)));
}

fn ik(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_ik");
    for sources in [1, 3, 5] {
        let (model, q0, targets) = ik_case(sources, 2);
        let cfg = IkConfig::default();
        group.bench_with_input(BenchmarkId::from_parameter(sources), &targets, |b, t| {
            b.iter(|| solve_ik(&model, black_box(&q0), t, &cfg))
        });
    }
    group.finish();
}

fn assignment(c: &mut Criterion) {
    let cost = DMatrix::from_fn(7, 7, |i, j| ((i * 7 + j) as f64 * 0.618).fract());
    c.bench_function("assignment_7x7", |b| b.iter(|| min_cost_assignment(black_box(&cost))));
}

// One second of a 5-device, 7-subject scene per iteration (about 30 ticks).
fn pipeline(c: &mut Criterion) {
    let s = scene(5, 7, 1.0);
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(20);
    group.bench_function("replay_1s_5x7", |b| {
        b.iter_batched(
            || {
                let mut p = Pipeline::new(PipelineConfig::default()).unwrap();
                p.set_devices(&s.devices);
                p
            },
            |mut p| replay(&mut p, &s.arrivals, Feed::Direct, |_| {}),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, qp_solve, kinematics, ik, assignment, pipeline);
criterion_main!(benches);
