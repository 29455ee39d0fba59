//! Multi-source inverse kinematics as a sequence of box-constrained QPs.
//!
//! Each outer iteration linearizes forward kinematics at the current pose
//! and solves for a displacement `dq`:
//!
//! ```text
//! minimize   dqᵀ Λ dq + Σ_i w_i δ_iᵀ D δ_i
//! subject to x + J dq = x_T,i + δ_i                   (every source i)
//!            -γ (q - q_L) ≤ dq ≤ γ (q_U - q)
//!            v_L Δt - dq_0 ≤ dq ≤ v_U Δt - dq_0
//! ```
//!
//! where `dq_0` is the displacement already applied during the current
//! tick and `Δt` is the tick length. The slack equalities are normally
//! eliminated by substitution; [`solve_step_explicit`] keeps them.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::Measurement;
use crate::qp::{self, QpError, QpProblem, QpSettings, QpStatus};
use crate::skeleton::{KeypointLabel, Keypoints, SkeletonError, SkeletonModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IkError {
    #[error("no target keypoints")]
    NoTargets,
    #[error("empty feasible box for DOF {dof}: [{lower}, {upper}]")]
    InfeasibleBox { dof: usize, lower: f64, upper: f64 },
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkConfig {
    /// Λ = damping · I.
    pub damping: f64,
    /// D = slack_weight · I for every keypoint.
    pub slack_weight: f64,
    pub gamma: f64,
    pub max_outer_iterations: usize,
    /// Length of one aggregator tick in seconds; scales the velocity box.
    pub step_dt: f64,
    /// Stop once the RMS residual improves by less than this (meters).
    pub convergence_eps: f64,
    /// Speed limit on the base translation (m/s).
    pub base_velocity_cap: f64,
    /// Enforce the per-tick velocity box.
    pub velocity_limits: bool,
    /// Scale each target's weight by its reported confidence.
    pub confidence_weighting: bool,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl Default for IkConfig {
    fn default() -> Self {
        IkConfig {
            damping: 1e-5,
            slack_weight: 1.0,
            gamma: 1.0,
            max_outer_iterations: 100,
            step_dt: 1.0 / 30.0,
            convergence_eps: 1e-6,
            base_velocity_cap: 3.0,
            velocity_limits: true,
            confidence_weighting: false,
            qp_tol: 1e-8,
            qp_max_iter: 200,
        }
    }
}

impl IkConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.damping > 0.0 && self.damping.is_finite()) {
            return Err("ik.damping must be positive".into());
        }
        if !(self.slack_weight > 0.0 && self.slack_weight.is_finite()) {
            return Err("ik.slack_weight must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err("ik.gamma must lie in (0, 1]".into());
        }
        if self.max_outer_iterations == 0 {
            return Err("ik.max_outer_iterations must be at least 1".into());
        }
        if !(self.step_dt > 0.0 && self.step_dt.is_finite()) {
            return Err("ik.step_dt must be positive".into());
        }
        if !(self.convergence_eps >= 0.0) {
            return Err("ik.convergence_eps must be non-negative".into());
        }
        if !(self.base_velocity_cap > 0.0) {
            return Err("ik.base_velocity_cap must be positive".into());
        }
        Ok(())
    }
}

/// One source's target set.
#[derive(Debug, Clone, PartialEq)]
pub struct IkSource {
    pub targets: [Option<Vector3<f64>>; KeypointLabel::COUNT],
    pub confidence: [f64; KeypointLabel::COUNT],
}

impl IkSource {
    pub fn from_keypoints(points: &Keypoints) -> Self {
        IkSource {
            targets: points.map(Some),
            confidence: [1.0; KeypointLabel::COUNT],
        }
    }

    pub fn from_measurement(m: &Measurement) -> Self {
        IkSource {
            targets: KeypointLabel::ALL.map(|l| m.get(l)),
            confidence: KeypointLabel::ALL.map(|l| m.confidence(l).map_or(0.0, f64::from)),
        }
    }

    pub fn present_count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IkTargets {
    pub sources: Vec<IkSource>,
}

impl IkTargets {
    pub fn single(points: &Keypoints) -> Self {
        IkTargets {
            sources: vec![IkSource::from_keypoints(points)],
        }
    }

    pub fn from_measurements<'a>(ms: impl IntoIterator<Item = &'a Measurement>) -> Self {
        IkTargets {
            sources: ms.into_iter().map(IkSource::from_measurement).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.iter().all(|s| s.present_count() == 0)
    }

    // Per-source weight: 1/n so that duplicating every source changes nothing.
    fn weight(&self, source: usize, label: KeypointLabel, cfg: &IkConfig) -> f64 {
        let base = 1.0 / self.sources.len() as f64;
        if cfg.confidence_weighting {
            base * self.sources[source].confidence[label.index()]
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkResult {
    pub q_new: DVector<f64>,
    /// Displacement applied during this call, `q_new - q_init`.
    pub qdot_total: DVector<f64>,
    /// Distance to each target after the last iteration, per source.
    pub residuals: Vec<[Option<f64>; KeypointLabel::COUNT]>,
    pub outer_iterations: usize,
    /// Weighted RMS residual after each accepted iteration, starting with the initial pose.
    pub rms_history: Vec<f64>,
}

impl IkResult {
    pub fn max_residual(&self) -> f64 {
        self.residuals
            .iter()
            .flat_map(|r| r.iter().flatten())
            .fold(0.0, |a: f64, &b| a.max(b))
    }
}

/// Per-coordinate displacement box: tightest of the position barrier and
/// the remaining velocity budget.
pub fn displacement_box(
    model: &SkeletonModel,
    q: &DVector<f64>,
    qdot0: &DVector<f64>,
    cfg: &IkConfig,
) -> Result<(DVector<f64>, DVector<f64>), IkError> {
    let n = model.dof_count();
    let mut lo = DVector::zeros(n);
    let mut hi = DVector::zeros(n);
    for (d, dof) in model.dofs().iter().enumerate() {
        let mut l = -cfg.gamma * (q[d] - dof.lower);
        let mut h = cfg.gamma * (dof.upper - q[d]);
        if cfg.velocity_limits {
            let (vl, vh) = if d < 3 {
                (-cfg.base_velocity_cap, cfg.base_velocity_cap)
            } else {
                (dof.velocity_lower, dof.velocity_upper)
            };
            l = l.max(vl * cfg.step_dt - qdot0[d]);
            h = h.min(vh * cfg.step_dt - qdot0[d]);
        }
        // Rounding can leave a budget a hair below zero; standing still
        // never widens a violation.
        if l > 0.0 && l < 1e-12 {
            l = 0.0;
        }
        if h < 0.0 && h > -1e-12 {
            h = 0.0;
        }
        if l.is_nan() || h.is_nan() || l > h {
            return Err(IkError::InfeasibleBox { dof: d, lower: l, upper: h });
        }
        lo[d] = l;
        hi[d] = h;
    }
    Ok((lo, hi))
}

struct Linearization {
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
}

fn check_targets(model: &SkeletonModel, q: &DVector<f64>, targets: &IkTargets) -> Result<(), IkError> {
    if q.len() != model.dof_count() {
        return Err(SkeletonError::DimensionMismatch {
            expected: model.dof_count(),
            got: q.len(),
        }
        .into());
    }
    if targets.is_empty() {
        return Err(IkError::NoTargets);
    }
    Ok(())
}

// Sources folded per label. For weights w_i and targets t_i,
//   Σ_i w_i |x - t_i|² = W |x - c|² + Σ_i w_i |t_i - c|²
// with W = Σ_i w_i and c the weighted centroid, so an iteration costs the
// same whatever the number of sources.
struct Aggregate {
    weight: [f64; KeypointLabel::COUNT],
    centroid: [Vector3<f64>; KeypointLabel::COUNT],
    spread: f64,
    total: f64,
}

impl Aggregate {
    fn new(targets: &IkTargets, cfg: &IkConfig) -> Self {
        let mut weight = [0.0; KeypointLabel::COUNT];
        let mut centroid = [Vector3::zeros(); KeypointLabel::COUNT];
        for label in KeypointLabel::ALL {
            let k = label.index();
            for (i, src) in targets.sources.iter().enumerate() {
                if let Some(t) = src.targets[k] {
                    let w = targets.weight(i, label, cfg);
                    weight[k] += w;
                    centroid[k] += w * t;
                }
            }
            if weight[k] > 0.0 {
                centroid[k] /= weight[k];
            }
        }
        let mut spread = 0.0;
        for (i, src) in targets.sources.iter().enumerate() {
            for label in KeypointLabel::ALL {
                if let Some(t) = src.targets[label.index()] {
                    spread += targets.weight(i, label, cfg) * (t - centroid[label.index()]).norm_squared();
                }
            }
        }
        Aggregate {
            weight,
            centroid,
            spread,
            total: weight.iter().sum(),
        }
    }

    fn rms(&self, model: &SkeletonModel, q: &DVector<f64>) -> Result<f64, IkError> {
        if self.total <= 0.0 {
            return Ok(0.0);
        }
        let kp = model.forward_kinematics(q.as_slice())?;
        let mut num = self.spread;
        for k in 0..KeypointLabel::COUNT {
            if self.weight[k] > 0.0 {
                num += self.weight[k] * (kp[k] - self.centroid[k]).norm_squared();
            }
        }
        Ok((num / self.total).sqrt())
    }
}

// Substituted form: ½ dqᵀ H dq + gᵀ dq with
//   H = 2 (Λ + Σ_k W_k J_kᵀ D J_k),  g = 2 Σ_k W_k J_kᵀ D (x_k - c_k).
fn linearize(model: &SkeletonModel, q: &DVector<f64>, agg: &Aggregate, cfg: &IkConfig) -> Result<Linearization, IkError> {
    let state = model.kinematics(q.as_slice())?;
    let n = model.dof_count();
    let mut hessian = DMatrix::from_diagonal_element(n, n, 2.0 * cfg.damping);
    let mut linear = DVector::zeros(n);
    let d = cfg.slack_weight;
    for label in KeypointLabel::ALL {
        let w_total = agg.weight[label.index()];
        if w_total == 0.0 {
            continue;
        }
        let weighted_resid = w_total * (state.keypoints[label.index()] - agg.centroid[label.index()]);
        let path = model.keypoint_path(label);
        let cols: Vec<Vector3<f64>> = path.iter().map(|&dof| state.column(label, dof)).collect();
        for (a, &da) in path.iter().enumerate() {
            linear[da] += 2.0 * d * cols[a].dot(&weighted_resid);
            for (b, &db) in path.iter().enumerate().skip(a) {
                let v = 2.0 * d * w_total * cols[a].dot(&cols[b]);
                hessian[(da, db)] += v;
                if a != b {
                    hessian[(db, da)] += v;
                }
            }
        }
    }
    Ok(Linearization { hessian, linear })
}

/// One linearized QP step; returns the displacement `dq`.
pub fn solve_step(
    model: &SkeletonModel,
    q: &DVector<f64>,
    qdot0: &DVector<f64>,
    targets: &IkTargets,
    cfg: &IkConfig,
) -> Result<DVector<f64>, IkError> {
    check_targets(model, q, targets)?;
    step(model, q, qdot0, &Aggregate::new(targets, cfg), cfg)
}

fn step(model: &SkeletonModel, q: &DVector<f64>, qdot0: &DVector<f64>, agg: &Aggregate, cfg: &IkConfig) -> Result<DVector<f64>, IkError> {
    let (lo, hi) = displacement_box(model, q, qdot0, cfg)?;
    let lin = linearize(model, q, agg, cfg)?;
    let problem = QpProblem::with_bounds(lin.hessian, lin.linear, lo, hi)?;
    let sol = qp::solve_with(
        &problem,
        &QpSettings {
            tol: cfg.qp_tol,
            max_iter: cfg.qp_max_iter,
            initial: None,
        },
        |_| {},
    );
    if sol.status != QpStatus::Optimal {
        log::debug!("IK step QP ended with {:?} after {} iterations", sol.status, sol.iterations);
    }
    Ok(sol.x)
}

/// The same step with the slack variables and target equalities kept
/// explicitly. Returns `dq` and the slack of every present target in
/// source-major, label order.
pub fn solve_step_explicit(
    model: &SkeletonModel,
    q: &DVector<f64>,
    qdot0: &DVector<f64>,
    targets: &IkTargets,
    cfg: &IkConfig,
) -> Result<(DVector<f64>, Vec<Vector3<f64>>), IkError> {
    check_targets(model, q, targets)?;
    let (lo, hi) = displacement_box(model, q, qdot0, cfg)?;
    let state = model.kinematics(q.as_slice())?;
    let n = model.dof_count();

    let rows: Vec<(usize, KeypointLabel, Vector3<f64>)> = targets
        .sources
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            KeypointLabel::ALL
                .into_iter()
                .filter_map(move |l| s.targets[l.index()].map(|t| (i, l, t)))
        })
        .collect();
    let m = rows.len();
    let nv = n + 3 * m;
    let mut h = DMatrix::zeros(nv, nv);
    for i in 0..n {
        h[(i, i)] = 2.0 * cfg.damping;
    }
    let mut a = DMatrix::zeros(3 * m, nv);
    let mut b = DVector::zeros(3 * m);
    for (r, &(src, label, target)) in rows.iter().enumerate() {
        let w = targets.weight(src, label, cfg);
        let block = Matrix3::identity() * (2.0 * w * cfg.slack_weight);
        h.fixed_view_mut::<3, 3>(n + 3 * r, n + 3 * r).copy_from(&block);
        for &dof in model.keypoint_path(label) {
            a.fixed_view_mut::<3, 1>(3 * r, dof).copy_from(&state.column(label, dof));
        }
        a.fixed_view_mut::<3, 3>(3 * r, n + 3 * r).copy_from(&(-Matrix3::identity()));
        b.fixed_rows_mut::<3>(3 * r)
            .copy_from(&(target - state.keypoints[label.index()]));
    }
    let mut lb = DVector::from_element(nv, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(nv, f64::INFINITY);
    lb.rows_mut(0, n).copy_from(&lo);
    ub.rows_mut(0, n).copy_from(&hi);
    let problem = QpProblem::new(h, DVector::zeros(nv), a, b, lb, ub)?;
    let sol = qp::solve_with(
        &problem,
        &QpSettings {
            tol: cfg.qp_tol,
            max_iter: cfg.qp_max_iter.max(4 * nv),
            initial: None,
        },
        |_| {},
    );
    let dq = sol.x.rows(0, n).into_owned();
    let slack = (0..m)
        .map(|r| sol.x.fixed_rows::<3>(n + 3 * r).into_owned())
        .collect();
    Ok((dq, slack))
}

fn residuals(model: &SkeletonModel, q: &DVector<f64>, targets: &IkTargets) -> Result<Vec<[Option<f64>; 12]>, IkError> {
    let kp = model.forward_kinematics(q.as_slice())?;
    Ok(targets
        .sources
        .iter()
        .map(|s| std::array::from_fn(|k| s.targets[k].map(|t| (kp[k] - t).norm())))
        .collect())
}

const MAX_BACKTRACK: usize = 8;

/// Iterate [`solve_step`] from `q_init` for one tick.
///
/// If the feasible box collapses the accumulated displacement is reset
/// once before giving up.
pub fn solve_ik(model: &SkeletonModel, q_init: &DVector<f64>, targets: &IkTargets, cfg: &IkConfig) -> Result<IkResult, IkError> {
    check_targets(model, q_init, targets)?;
    let mut q = q_init.clone();
    let mut anchor = q_init.clone();
    let mut retried = false;
    let agg = Aggregate::new(targets, cfg);
    let mut rms = agg.rms(model, &q)?;
    let mut history = vec![rms];
    let mut iterations = 0;

    while iterations < cfg.max_outer_iterations {
        iterations += 1;
        let qdot0 = &q - &anchor;
        let dq = match step(model, &q, &qdot0, &agg, cfg) {
            Ok(dq) => dq,
            Err(IkError::InfeasibleBox { .. }) if !retried => {
                retried = true;
                anchor = q.clone();
                continue;
            }
            Err(e) => return Err(e),
        };

        // Halve the step until the weighted residual does not grow.
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let candidate = model.clamp_to_limits((&q + &dq * scale).as_slice());
            let cand_rms = agg.rms(model, &candidate)?;
            if cand_rms <= rms {
                accepted = Some((candidate, cand_rms));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, cand_rms)) = accepted else {
            break;
        };
        let improvement = rms - cand_rms;
        q = candidate;
        rms = cand_rms;
        history.push(rms);
        if improvement < cfg.convergence_eps {
            break;
        }
    }

    Ok(IkResult {
        qdot_total: &q - q_init,
        residuals: residuals(model, &q, targets)?,
        q_new: q,
        outer_iterations: iterations,
        rms_history: history,
    })
}
