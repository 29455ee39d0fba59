//! Independent reference implementations and fixtures shared by the
//! integration and acceptance tests. Nothing here calls into the code it
//! is used to check.

#![allow(dead_code)]

pub mod oracles;

use nalgebra::{DMatrix, DVector, Vector3};
use posefuse_core::harness::scene::{generate_scene, Scene, SceneConfig};
use posefuse_core::metrics::{default_alpha_grid, evaluate, LabeledFrame, LabeledSkeleton, MetricReport};
use posefuse_core::{replay, Feed, FusedFrame, Pipeline, PipelineConfig, QpProblem, RunReport, SkeletonModel};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random strictly convex QP with finite boxes (a few variables free)
/// and feasible equalities.
pub fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem {
    let factor = DMatrix::from_fn(n, n, |_, _| gaussian(rng));
    let hessian = factor.transpose() * &factor / n as f64 + DMatrix::identity(n, n) * 0.5;
    let hessian = (&hessian + hessian.transpose()) * 0.5;
    let linear = DVector::from_fn(n, |_, _| 3.0 * gaussian(rng));
    let mut lower = DVector::zeros(n);
    let mut upper = DVector::zeros(n);
    let mut inside = DVector::zeros(n);
    for i in 0..n {
        if rng.random::<f64>() < 0.1 {
            lower[i] = f64::NEG_INFINITY;
            upper[i] = f64::INFINITY;
            inside[i] = gaussian(rng);
        } else {
            lower[i] = -rng.random_range(0.2..2.0);
            upper[i] = rng.random_range(0.2..2.0);
            inside[i] = rng.random_range(lower[i] * 0.8..upper[i] * 0.8);
        }
    }
    let eq = DMatrix::from_fn(m, n, |_, _| gaussian(rng));
    let rhs = &eq * &inside;
    QpProblem::new(hessian, linear, eq, rhs, lower, upper).expect("generated QP is valid")
}

/// Every keypoint-bearing DOF sampled uniformly inside its limits; the base
/// translation within a few meters and the base rotation within ±π.
pub fn random_pose(model: &SkeletonModel, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let mut q = model.rest_q();
    for (d, dof) in model.dofs().iter().enumerate() {
        q[d] = match d {
            0 | 1 => rng.random_range(-3.0..3.0),
            2 => q[d] + rng.random_range(-0.2..0.2),
            3..=5 => rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            _ => rng.random_range(dof.lower.max(-3.0)..=dof.upper.min(3.0)),
        };
    }
    q
}

/// Generate a scene, replay it through a fresh pipeline and score it.
pub struct SceneRun {
    pub scene: Scene,
    pub frames: Vec<FusedFrame>,
    pub report: RunReport,
    pub metrics: MetricReport,
}

pub fn run_scene(scene_cfg: &SceneConfig, cfg: &PipelineConfig, feed: Feed) -> SceneRun {
    let template = SkeletonModel::default_profile();
    let scene = generate_scene(&template, scene_cfg);
    let mut pipeline = Pipeline::new(cfg.clone()).expect("valid configuration");
    pipeline.set_devices(&scene.devices);
    let mut frames = Vec::new();
    let report = replay(&mut pipeline, &scene.arrivals, feed, |f| frames.push(f.clone()));
    let labeled: Vec<_> = frames.iter().map(FusedFrame::to_labeled).collect();
    let tolerance = 0.5 / scene_cfg.gt_rate;
    let metrics = evaluate(&labeled, &scene.ground_truth, &default_alpha_grid(), tolerance).expect("non-empty ground truth");
    SceneRun {
        scene,
        frames,
        report,
        metrics,
    }
}

/// Ordinary least squares `y = a + b x`: returns `(b, standard error of b)`.
pub fn ols_slope(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let sse: f64 = points.iter().map(|p| (p.1 - a - b * p.0).powi(2)).sum();
    let se = (sse / (n - 2.0) / sxx).sqrt();
    (b, se)
}

/// Planar chain on a fixed base: links along +x, every joint about +y.
/// `l_elbow` sits at the last joint, `l_wrist` at the tip and every other
/// keypoint at the root.
pub fn chain_profile(links: &[(f64, [f64; 2])]) -> SkeletonModel {
    use posefuse_core::KeypointLabel;
    let mut doc = String::from(
        "version = 1\nname = \"chain\"\nnominal_height = 1.75\n\
         [base]\njoint = \"root\"\ntranslation = [0.0, 0.0, 0.0]\norientation = [0.0, 0.0, 0.0]\n",
    );
    let base = [
        ("tx", "translational", "[1.0, 0.0, 0.0]"),
        ("ty", "translational", "[0.0, 1.0, 0.0]"),
        ("tz", "translational", "[0.0, 0.0, 1.0]"),
        ("rx", "revolute", "[1.0, 0.0, 0.0]"),
        ("ry", "revolute", "[0.0, 1.0, 0.0]"),
        ("rz", "revolute", "[0.0, 0.0, 1.0]"),
    ];
    for (name, kind, axis) in base {
        doc += &format!("[[dofs]]\nname = \"{name}\"\nkind = \"{kind}\"\naxis = {axis}\nlimits = [0.0, 0.0]\n");
    }
    for (i, (_, lim)) in links.iter().enumerate() {
        doc += &format!(
            "[[dofs]]\nname = \"a{i}\"\nkind = \"revolute\"\naxis = [0.0, 1.0, 0.0]\nlimits_deg = [{}, {}]\n",
            lim[0], lim[1]
        );
    }
    doc += "[[joints]]\nname = \"root\"\ndofs = [\"tx\", \"ty\", \"tz\", \"rx\", \"ry\", \"rz\"]\n";
    for i in 0..links.len() {
        doc += &format!("[[joints]]\nname = \"j{i}\"\ndofs = [\"a{i}\"]\n");
    }
    doc += "[[joints]]\nname = \"tip\"\n";
    doc += "[[bones]]\nparent = \"root\"\nchild = \"j0\"\ndirection = [1.0, 0.0, 0.0]\nrest_length = 0.0\nsegment = \"mount\"\n";
    for (i, (len, _)) in links.iter().enumerate() {
        let child = if i + 1 == links.len() { "tip".to_string() } else { format!("j{}", i + 1) };
        doc += &format!(
            "[[bones]]\nparent = \"j{i}\"\nchild = \"{child}\"\ndirection = [1.0, 0.0, 0.0]\nrest_length = {len}\nsegment = \"link{i}\"\n"
        );
    }
    doc += "[keypoints]\n";
    for label in KeypointLabel::ALL {
        let joint = match label {
            KeypointLabel::LeftWrist => "tip".to_string(),
            KeypointLabel::LeftElbow => format!("j{}", links.len() - 1),
            _ => "root".to_string(),
        };
        doc += &format!("{} = \"{joint}\"\n", label.name());
    }
    SkeletonModel::from_toml_str(&doc).expect("chain profile")
}

/// Toy sequence: up to four subjects wandering with occasional misses,
/// predictions jittered, sometimes relabelled, sometimes absent or spurious.
pub fn toy_sequences(seed: u64, n_subjects: usize, n_frames: usize) -> (Vec<LabeledFrame>, Vec<LabeledFrame>) {
    let mut rng = rng(seed);
    let centres: Vec<Vector3<f64>> = (0..n_subjects)
        .map(|_| Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), 1.0))
        .collect();
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    let mut relabel: Vec<u64> = (0..n_subjects as u64).map(|i| i + 10).collect();
    for f in 0..n_frames {
        let t = f as f64 / 30.0;
        let mut g = Vec::new();
        let mut p = Vec::new();
        if rng.random::<f64>() < 0.15 {
            relabel.swap(rng.random_range(0..n_subjects), rng.random_range(0..n_subjects));
        }
        for (i, c) in centres.iter().enumerate() {
            let base: [Vector3<f64>; 12] =
                std::array::from_fn(|k| c + Vector3::new(0.0, 0.1 * k as f64, 0.05 * f as f64));
            if rng.random::<f64>() < 0.1 {
                continue;
            }
            let keypoints = base.map(|b| (rng.random::<f64>() > 0.1).then_some(b));
            g.push(LabeledSkeleton { id: i as u64, keypoints });
            if rng.random::<f64>() < 0.15 {
                continue;
            }
            let err = rng.random_range(0.0..0.9);
            let keypoints = base.map(|b| {
                let dir = Vector3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng));
                (rng.random::<f64>() > 0.1).then_some(b + dir.normalize() * err * rng.random_range(0.5..1.5))
            });
            p.push(LabeledSkeleton { id: relabel[i], keypoints });
        }
        if rng.random::<f64>() < 0.1 {
            p.push(LabeledSkeleton {
                id: 99,
                keypoints: std::array::from_fn(|_| Some(Vector3::new(rng.random_range(-2.0..2.0), 0.0, 1.0))),
            });
        }
        gt.push(LabeledFrame { t, skeletons: g });
        pred.push(LabeledFrame { t, skeletons: p });
    }
    (pred, gt)
}
