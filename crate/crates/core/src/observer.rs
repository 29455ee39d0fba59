//! Per-DOF constant-acceleration Kalman filters.
//!
//! Each DOF carries a state `(q, q', q'')` observed through `H = [1 0 0]`.

use nalgebra::{DVector, Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::association::BodyTrack;
use crate::skeleton::{DofKind, SkeletonModel, BASE_DOF_COUNT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserverConfig {
    /// Diagonal of the process-noise covariance.
    pub process_noise: [f64; 3],
    /// Scalar measurement-noise variance.
    pub measurement_noise: f64,
    /// Diagonal of the covariance used when a filter is first initialized.
    pub bootstrap_covariance: [f64; 3],
}

impl Default for ObserverConfig {
    fn default() -> Self {
        ObserverConfig {
            process_noise: [0.5; 3],
            measurement_noise: 1.0,
            bootstrap_covariance: [0.5; 3],
        }
    }
}

impl ObserverConfig {
    fn sigma(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.process_noise))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.process_noise.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err("observer.process_noise must be non-negative".into());
        }
        if !(self.measurement_noise.is_finite() && self.measurement_noise > 0.0) {
            return Err("observer.measurement_noise must be positive".into());
        }
        if self.bootstrap_covariance.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err("observer.bootstrap_covariance must be positive".into());
        }
        Ok(())
    }
}

/// Constant-acceleration transition matrix for step `dt`.
pub fn transition(dt: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, dt, 0.5 * dt * dt, 0.0, 1.0, dt, 0.0, 0.0, 1.0)
}

const H: RowVector3<f64> = RowVector3::new(1.0, 0.0, 0.0);

#[derive(Debug, Clone, PartialEq)]
pub struct JointObserverState {
    /// `(q, q', q'')`.
    pub state: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub last_update: f64,
}

impl JointObserverState {
    /// Position = `z`, zero rate terms, bootstrap covariance.
    pub fn bootstrap(z: f64, t: f64, cfg: &ObserverConfig) -> Self {
        JointObserverState {
            state: Vector3::new(z, 0.0, 0.0),
            covariance: Matrix3::from_diagonal(&Vector3::from(cfg.bootstrap_covariance)),
            last_update: t,
        }
    }

    pub fn position(&self) -> f64 {
        self.state[0]
    }

    pub fn predict(&self, dt: f64, cfg: &ObserverConfig) -> Self {
        assert!(dt > 0.0, "predict requires dt > 0, got {dt}");
        let f = transition(dt);
        let p = f * self.covariance * f.transpose() + cfg.sigma();
        JointObserverState {
            state: f * self.state,
            covariance: symmetrize(p),
            last_update: self.last_update + dt,
        }
    }

    /// Measurement update with innovation `z - q`.
    pub fn correct(&self, z: f64, cfg: &ObserverConfig) -> Self {
        self.correct_with_innovation(z - self.state[0], cfg)
    }

    fn correct_with_innovation(&self, innovation: f64, cfg: &ObserverConfig) -> Self {
        let p = self.covariance;
        let s = (H * p * H.transpose())[0] + cfg.measurement_noise;
        let gain: Vector3<f64> = p * H.transpose() / s;
        let state = self.state + gain * innovation;
        let covariance = symmetrize((Matrix3::identity() - gain * H) * p);
        JointObserverState {
            state,
            covariance,
            last_update: self.last_update,
        }
    }
}

fn symmetrize(p: Matrix3<f64>) -> Matrix3<f64> {
    (p + p.transpose()) * 0.5
}

/// Shortest signed difference `a - b` on the circle.
pub fn angle_difference(a: f64, b: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let d = (a - b).rem_euclid(two_pi);
    if d > std::f64::consts::PI {
        d - two_pi
    } else {
        d
    }
}

/// One filter per DOF of a skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverBank {
    filters: Vec<JointObserverState>,
    kinds: Vec<DofKind>,
}

impl ObserverBank {
    pub fn bootstrap(model: &SkeletonModel, z: &[f64], t: f64, cfg: &ObserverConfig) -> Self {
        assert_eq!(z.len(), model.dof_count());
        ObserverBank {
            filters: z.iter().map(|&v| JointObserverState::bootstrap(v, t, cfg)).collect(),
            kinds: model.dofs().iter().map(|d| d.kind).collect(),
        }
    }

    pub fn filters(&self) -> &[JointObserverState] {
        &self.filters
    }

    pub fn positions(&self) -> Vec<f64> {
        self.filters.iter().map(JointObserverState::position).collect()
    }

    pub fn covariance_trace(&self) -> f64 {
        self.filters.iter().map(|f| f.covariance.trace()).sum()
    }

    pub fn last_update(&self) -> f64 {
        self.filters.first().map_or(0.0, |f| f.last_update)
    }

    /// Predict-only step (no associated data this tick).
    pub fn predict(&mut self, dt: f64, cfg: &ObserverConfig) {
        for f in &mut self.filters {
            *f = f.predict(dt, cfg);
        }
    }

    /// Predict then correct every DOF against `z`.
    pub fn step(&mut self, z: &[f64], dt: f64, cfg: &ObserverConfig) {
        assert_eq!(z.len(), self.filters.len());
        for ((f, &zi), kind) in self.filters.iter_mut().zip(z).zip(&self.kinds) {
            let predicted = f.predict(dt, cfg);
            let innovation = match kind {
                DofKind::Revolute => angle_difference(zi, predicted.state[0]),
                DofKind::Translational => zi - predicted.state[0],
            };
            *f = predicted.correct_with_innovation(innovation, cfg);
        }
    }

    /// Overwrite positions (after limit clamping) keeping rates and covariance.
    pub fn set_positions(&mut self, q: &[f64]) {
        for (f, &v) in self.filters.iter_mut().zip(q) {
            f.state[0] = v;
        }
    }
}

/// Filter a fresh IK solution `z` into `track`: predict and correct every
/// DOF, clip to the joint limits and velocity box and adopt the result.
pub fn step_track(track: &mut BodyTrack, z: &[f64], dt: f64, cfg: &ObserverConfig) {
    track.observers.step(z, dt, cfg);
    finish(track, dt);
}

/// Prediction-only tick for a track without associated data.
pub fn coast_track(track: &mut BodyTrack, dt: f64, cfg: &ObserverConfig) {
    track.observers.predict(dt, cfg);
    finish(track, dt);
}

// The filtered pose is projected onto the position limits intersected with
// the velocity box around the previous pose. The previous pose is within its
// limits, so the intersection is never empty.
fn finish(track: &mut BodyTrack, dt: f64) {
    let raw = track.observers.positions();
    let q = DVector::from_iterator(
        raw.len(),
        track.model.dofs().iter().enumerate().map(|(d, dof)| {
            if d < BASE_DOF_COUNT {
                return raw[d];
            }
            let prev = track.q[d];
            let lo = dof.lower.max(prev + dof.velocity_lower * dt).min(prev);
            let hi = dof.upper.min(prev + dof.velocity_upper * dt).max(prev);
            raw[d].clamp(lo, hi)
        }),
    );
    track.observers.set_positions(q.as_slice());
    track.q = q;
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg() -> ObserverConfig {
        ObserverConfig::default()
    }

    fn state(q: [f64; 3], p: Matrix3<f64>) -> JointObserverState {
        JointObserverState {
            state: Vector3::from(q),
            covariance: p,
            last_update: 0.0,
        }
    }

    #[test]
    fn predict_examples() {
        let s = state([1.0, 2.0, 0.0], Matrix3::zeros()).predict(0.1, &cfg());
        assert_relative_eq!(s.state, Vector3::new(1.2, 2.0, 0.0), epsilon = 1e-15);
        let s = state([0.0, 0.0, 1.0], Matrix3::zeros()).predict(1.0, &cfg());
        assert_relative_eq!(s.state, Vector3::new(0.5, 1.0, 1.0));
        assert_eq!(s.covariance, Matrix3::from_diagonal_element(0.5));
    }

    #[test]
    fn huge_measurement_noise_ignores_measurement() {
        let c = ObserverConfig {
            measurement_noise: 1e12,
            ..cfg()
        };
        let prior = state([0.3, 0.1, 0.0], Matrix3::identity());
        let post = prior.correct(10.0, &c);
        assert!((post.state - prior.state).abs().max() < 1e-6);
    }

    #[test]
    fn huge_prior_trusts_measurement() {
        let prior = state([0.3, 0.1, 0.0], Matrix3::from_diagonal_element(1e12));
        let post = prior.correct(-2.0, &cfg());
        assert!((post.state[0] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn one_radian_jump_moves_less_than_one_radian() {
        let mut bank = ObserverBank {
            filters: vec![JointObserverState::bootstrap(0.0, 0.0, &cfg())],
            kinds: vec![DofKind::Revolute],
        };
        for _ in 0..20 {
            bank.step(&[0.0], 1.0 / 30.0, &cfg());
        }
        let before = bank.positions()[0];
        bank.step(&[1.0], 1.0 / 30.0, &cfg());
        let moved = bank.positions()[0] - before;
        assert!(moved > 0.0 && moved < 1.0, "moved {moved}");
    }

    #[test]
    fn coasting_grows_covariance() {
        let mut bank = ObserverBank {
            filters: vec![JointObserverState::bootstrap(0.0, 0.0, &cfg()); 3],
            kinds: vec![DofKind::Revolute; 3],
        };
        let before = bank.covariance_trace();
        bank.predict(1.0 / 30.0, &cfg());
        assert!(bank.covariance_trace() > before);
    }

    #[test]
    fn zero_innovation_keeps_state_and_shrinks_covariance() {
        let prior = state([0.4, 0.2, -0.1], Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0)));
        let post = prior.correct(0.4, &cfg());
        assert_eq!(post.state, prior.state);
        assert!(post.covariance.trace() < prior.covariance.trace());
    }

    #[test]
    fn angle_difference_wraps() {
        assert_relative_eq!(angle_difference(3.1, -3.1), 6.2 - std::f64::consts::TAU, epsilon = 1e-12);
        assert_relative_eq!(angle_difference(0.2, 0.1), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn translational_dofs_do_not_wrap() {
        let mut bank = ObserverBank {
            filters: vec![JointObserverState::bootstrap(0.0, 0.0, &cfg())],
            kinds: vec![DofKind::Translational],
        };
        bank.step(&[6.0], 0.1, &cfg());
        assert!(bank.positions()[0] > 3.0);
    }
}
