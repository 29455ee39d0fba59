//! Seeded inputs shared by the benchmarks.

use nalgebra::{DMatrix, DVector};
use posefuse_core::harness::scene::{generate_scene, Scene, SceneConfig};
use posefuse_core::{IkTargets, QpProblem, SkeletonModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Strictly convex QP of dimension `n` with `m` feasible equalities and a
/// box on every variable.
pub fn qp_problem(n: usize, m: usize, seed: u64) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = f.transpose() * &f + DMatrix::identity(n, n) * 0.5;
    let h = (&h + h.transpose()) * 0.5;
    let g = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let lower = DVector::from_fn(n, |_, _| -rng.random_range(0.2..2.0));
    let upper = DVector::from_fn(n, |_, _| rng.random_range(0.2..2.0));
    let inside = lower.zip_map(&upper, |l, u| 0.5 * (l + u));
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let b = &a * inside;
    QpProblem::new(h, g, a, b, lower, upper).expect("valid problem")
}

/// A pose of the default profile, targets for a slightly different pose seen
/// by `sources` devices, and the starting configuration.
pub fn ik_case(sources: usize, seed: u64) -> (SkeletonModel, DVector<f64>, IkTargets) {
    let model = SkeletonModel::default_profile();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q0 = model.rest_q();
    let mut goal = q0.clone();
    for v in goal.iter_mut().skip(6) {
        *v += rng.random_range(-0.1..0.1);
    }
    let goal = model.clamp_to_limits(goal.as_slice());
    let kp = model.forward_kinematics(goal.as_slice()).expect("pose fits the model");
    let mut targets = IkTargets::single(&kp);
    for _ in 1..sources {
        let noisy = kp.map(|p| p.map(|c| c + rng.random_range(-0.01..0.01)));
        targets.sources.extend(IkTargets::single(&noisy).sources);
    }
    (model, q0, targets)
}

pub fn scene(n_devices: usize, n_subjects: usize, duration: f64) -> Scene {
    generate_scene(
        &SkeletonModel::default_profile(),
        &SceneConfig {
            n_devices,
            n_subjects,
            duration,
            ..SceneConfig::default()
        },
    )
}
