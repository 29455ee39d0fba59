//! Each module checked against an independent reference.

mod support;

use nalgebra::{DMatrix, Vector3};
use posefuse_core::assignment::{assignment_cost, min_cost_assignment};
use posefuse_core::ik::IkSource;
use posefuse_core::metrics::{default_alpha_grid, evaluate, LabeledFrame, LabeledSkeleton};
use posefuse_core::observer::{ObserverBank, ObserverConfig};
use posefuse_core::qp;
use posefuse_core::skeleton::DofKind;
use posefuse_core::{solve_ik, IkConfig, IkTargets, KeypointLabel, SkeletonModel};
use rand::Rng;
use support::oracles::{self, ScalarKf};

#[test]
fn qp_matches_projected_gradient_on_small_problem() {
    let mut rng = support::rng(8);
    let p = support::random_qp(&mut rng, 8, 3);
    let ours = qp::solve(&p, 1e-10, 500);
    assert_eq!(ours.status, qp::QpStatus::Optimal);
    let reference = oracles::qp_projected_gradient(&p, 1e-12);
    assert!((&ours.x - &reference).amax() < 1e-6, "{}", (&ours.x - &reference).amax());
    assert!(p.eq_residual(&ours.x) < 1e-9);
}

#[test]
fn qp_matches_projected_gradient_across_sizes() {
    let mut rng = support::rng(21);
    for case in 0..40 {
        let n = rng.random_range(1..=30);
        let m = rng.random_range(0..=n / 3);
        let p = support::random_qp(&mut rng, n, m);
        let ours = qp::solve(&p, 1e-10, 1000);
        assert_eq!(ours.status, qp::QpStatus::Optimal, "case {case}");
        let reference = oracles::qp_projected_gradient(&p, 1e-12);
        let gap = (p.objective(&ours.x) - p.objective(&reference)).abs();
        assert!(gap < 1e-6, "case {case} (n {n}, m {m}): objective gap {gap:e}");
        for i in 0..n {
            assert!(ours.x[i] >= p.lower()[i] && ours.x[i] <= p.upper()[i]);
        }
    }
}

#[test]
fn assignment_matches_enumeration() {
    let mut rng = support::rng(5);
    for _ in 0..300 {
        let r = rng.random_range(1..=6);
        let c = rng.random_range(1..=6);
        // Integer costs: totals compare exactly and ties are common.
        let cost = DMatrix::from_fn(r, c, |_, _| rng.random_range(0..20) as f64);
        let pairs = min_cost_assignment(&cost);
        assert_eq!(pairs.len(), r.min(c));
        assert_eq!(assignment_cost(&cost, &pairs), oracles::brute_assignment_cost(&cost));
        // Continuous costs: the optimum is unique.
        let cost = DMatrix::from_fn(r, c, |_, _| rng.random::<f64>());
        let optima = oracles::brute_assignment(&cost);
        assert_eq!(optima.len(), 1);
        assert_eq!(min_cost_assignment(&cost), optima[0]);
    }
}

#[test]
fn assignment_two_by_two_example() {
    let cost = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 100.0]);
    assert_eq!(min_cost_assignment(&cost), vec![(0, 1), (1, 0)]);
}

#[test]
fn metrics_match_brute_force_counting() {
    let alphas = default_alpha_grid();
    for seed in 0..60 {
        let subjects = 1 + seed as usize % 4;
        let frames = 5 + seed as usize % 16;
        let (pred, gt) = support::toy_sequences(seed, subjects, frames);
        let ours = evaluate(&pred, &gt, &alphas, 1.0 / 60.0).unwrap();
        let brute = oracles::brute_scores(&pred, &gt, &alphas);
        for (a, b, name) in [
            (ours.det_a, brute.det_a, "DetA"),
            (ours.ass_a, brute.ass_a, "AssA"),
            (ours.loc_a, brute.loc_a, "LocA"),
            (ours.hota, brute.hota, "HOTA"),
        ] {
            assert!((a - b).abs() < 1e-9, "seed {seed}: {name} {a} vs {b}");
        }
    }
}

#[test]
fn metrics_id_swap_against_counting_oracle() {
    let alphas = default_alpha_grid();
    let skel = |id: u64, y: f64| LabeledSkeleton {
        id,
        keypoints: std::array::from_fn(|k| Some(Vector3::new(k as f64 * 0.1, y, 1.0))),
    };
    let gt: Vec<LabeledFrame> = (0..12)
        .map(|f| LabeledFrame {
            t: f as f64 / 30.0,
            skeletons: vec![skel(0, 0.0), skel(1, 3.0)],
        })
        .collect();
    let pred: Vec<LabeledFrame> = (0..12)
        .map(|f| {
            let (a, b) = if f < 4 { (7, 8) } else { (8, 7) };
            LabeledFrame {
                t: f as f64 / 30.0,
                skeletons: vec![skel(a, 0.0), skel(b, 3.0)],
            }
        })
        .collect();
    let ours = evaluate(&pred, &gt, &alphas, 1.0 / 60.0).unwrap();
    let brute = oracles::brute_scores(&pred, &gt, &alphas);
    assert_eq!(ours.det_a, 1.0);
    assert!(ours.ass_a < 1.0);
    assert!((ours.ass_a - brute.ass_a).abs() < 1e-12);
    // 8 frames of 12 under one pairing, 4 under the other.
    let expected = (8.0 * 8.0 / 16.0 + 4.0 * 4.0 / 20.0) / 12.0;
    assert!((ours.ass_a - expected).abs() < 1e-12, "{}", ours.ass_a);
}

#[test]
fn observer_bank_matches_scalar_filters() {
    let model = SkeletonModel::default_profile();
    let cfg = ObserverConfig::default();
    let mut rng = support::rng(3);
    let n = model.dof_count();
    let mut z: Vec<f64> = model.rest_q().iter().copied().collect();
    let mut bank = ObserverBank::bootstrap(&model, &z, 0.0, &cfg);
    let mut reference: Vec<ScalarKf> = model
        .dofs()
        .iter()
        .zip(&z)
        .map(|(d, &z0)| {
            ScalarKf::new(z0, cfg.bootstrap_covariance, cfg.process_noise, cfg.measurement_noise, d.kind == DofKind::Revolute)
        })
        .collect();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let dt = rng.random_range(0.02..0.05);
        for (d, v) in z.iter_mut().enumerate() {
            *v += 0.05 * support::gaussian(&mut rng);
            // Let the base yaw wander across ±π.
            if d == 5 {
                *v += 0.2;
                if *v > std::f64::consts::PI {
                    *v -= std::f64::consts::TAU;
                }
            }
        }
        bank.step(&z, dt, &cfg);
        for (kf, &zi) in reference.iter_mut().zip(&z) {
            kf.predict(dt);
            kf.correct(zi);
        }
        for d in 0..n {
            let f = &bank.filters()[d];
            for i in 0..3 {
                worst = worst.max((f.state[i] - reference[d].x[i]).abs());
            }
        }
    }
    assert!(worst < 1e-9, "max deviation {worst:e}");
}

#[test]
fn two_link_arm_reaches_analytic_angles() {
    let (l0, l1) = (0.3, 0.25);
    let model = support::chain_profile(&[(l0, [-90.0, 90.0]), (l1, [0.0, 150.0])]);
    let cfg = IkConfig {
        velocity_limits: false,
        ..IkConfig::default()
    };
    let mut rng = support::rng(12);
    for _ in 0..25 {
        let t1 = rng.random_range(-1.2..1.2);
        let t2 = rng.random_range(0.2..2.4);
        let target = oracles::two_link_fk(l0, l1, t1, t2);
        let (a1, a2) = oracles::two_link_ik(l0, l1, target.x, target.z).unwrap();
        assert!((a1 - t1).abs() < 1e-9 && (a2 - t2).abs() < 1e-9);

        let mut targets = [None; 12];
        targets[KeypointLabel::LeftWrist.index()] = Some(target);
        let targets = IkTargets {
            sources: vec![IkSource {
                targets,
                confidence: [1.0; 12],
            }],
        };
        let mut q0 = model.rest_q();
        q0[7] = 0.3;
        let r = solve_ik(&model, &q0, &targets, &cfg).unwrap();
        assert!((r.q_new[6] - a1).abs() < 1e-4, "shoulder {} vs {a1}", r.q_new[6]);
        assert!((r.q_new[7] - a2).abs() < 1e-4, "elbow {} vs {a2}", r.q_new[7]);
    }
}

#[test]
fn qp_solution_is_stationary_on_free_coordinates() {
    // Unconstrained reference: H x = −g.
    let mut rng = support::rng(30);
    let p = support::random_qp(&mut rng, 12, 0);
    let h = p.hessian().clone();
    let g = p.linear().clone();
    let free = qp::QpProblem::unconstrained(h.clone(), g.clone()).unwrap();
    let x = qp::solve(&free, 1e-12, 100).x;
    let exact = h.cholesky().unwrap().solve(&(-g));
    assert!((x - exact).amax() < 1e-9);
}
