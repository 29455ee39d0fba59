//! Seeded synthetic scenes: articulated subjects, a ring of devices and the
//! corrupted measurement streams those devices would report.

use std::collections::hash_map::DefaultHasher;
use std::f64::consts::{PI, TAU};
use std::hash::Hasher;

use nalgebra::{DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::association::{Measurement, MeasurementBatch};
use crate::metrics::{LabeledFrame, LabeledSkeleton};
use crate::skeleton::{KeypointLabel, Keypoints, SkeletonModel, BASE_DOF_COUNT};

use super::codec::{encode, WireMessage};

/// Mounting and timing of one simulated device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: u32,
    pub origin: [f64; 3],
    /// Heading of the optical axis in the ground plane (rad).
    pub yaw: f64,
    /// Full horizontal field of view (degrees).
    pub fov_deg: f64,
    pub frame_rate: f64,
    /// Offset of the first capture (s).
    pub phase: f64,
    pub latency_mean: f64,
    pub latency_jitter: f64,
}

impl DeviceSpec {
    pub fn origin(&self) -> Vector3<f64> {
        Vector3::from(self.origin)
    }

    pub fn sees(&self, p: &Vector3<f64>) -> bool {
        let d = Vector2::new(p.x - self.origin[0], p.y - self.origin[1]);
        if d.norm() < 1e-9 {
            return true;
        }
        let bearing = d.y.atan2(d.x);
        let off = crate::observer::angle_difference(bearing, self.yaw).abs();
        off <= 0.5 * self.fov_deg.to_radians()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Subjects wander around fixed anchor points.
    Wander,
    /// Two subjects walk past each other through the arena centre.
    Crossing,
    /// Subjects stand motionless at their anchor points.
    Still,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_subjects: usize,
    pub n_devices: usize,
    pub duration: f64,
    pub seed: u64,
    pub layout: Layout,
    /// Isotropic keypoint noise (m).
    pub noise_sigma: f64,
    pub dropout: f64,
    pub outlier_prob: f64,
    /// Outlier displacement magnitude range (m).
    pub outlier_magnitude: [f64; 2],
    pub latency_mean: f64,
    pub latency_jitter: f64,
    pub frame_rate: f64,
    /// Sampling rate of the ground truth (Hz).
    pub gt_rate: f64,
    /// Fraction of a frame period over which device phases are spread.
    pub phase_spread: f64,
    pub ring_radius: f64,
    pub device_height: f64,
    pub fov_deg: f64,
    /// Subjects hide keypoints behind them from a device.
    pub occlusion: bool,
    /// A subject's own torso hides its far-side keypoints.
    pub self_occlusion: bool,
    pub max_speed: f64,
    /// Per-segment deviation from the population proportions (fraction).
    pub segment_jitter: f64,
    /// Explicit device list; generated on a ring when empty.
    pub devices: Vec<DeviceSpec>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_subjects: 3,
            n_devices: 3,
            duration: 10.0,
            seed: 0,
            layout: Layout::Wander,
            noise_sigma: 0.02,
            dropout: 0.0,
            outlier_prob: 0.0,
            outlier_magnitude: [0.5, 2.0],
            latency_mean: 0.02,
            latency_jitter: 0.005,
            frame_rate: 30.0,
            gt_rate: 30.0,
            phase_spread: 1.0,
            ring_radius: 4.5,
            device_height: 2.2,
            fov_deg: 70.0,
            occlusion: true,
            self_occlusion: true,
            max_speed: 0.8,
            segment_jitter: 0.03,
            devices: Vec::new(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), String> {
        let prob = |v: f64, name: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} must lie in [0, 1]"))
            }
        };
        prob(self.dropout, "dropout")?;
        prob(self.outlier_prob, "outlier_prob")?;
        prob(self.phase_spread, "phase_spread")?;
        if !(0.0..0.5).contains(&self.segment_jitter) {
            return Err("segment_jitter must lie in [0, 0.5)".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return Err("noise_sigma must be non-negative".into());
        }
        if !(self.duration > 0.0 && self.frame_rate > 0.0 && self.gt_rate > 0.0) {
            return Err("duration and rates must be positive".into());
        }
        if self.layout == Layout::Crossing && self.n_subjects != 2 {
            return Err("the crossing layout has exactly two subjects".into());
        }
        let [lo, hi] = self.outlier_magnitude;
        if !(0.0 <= lo && lo <= hi) {
            return Err("outlier_magnitude must be an ordered non-negative range".into());
        }
        Ok(())
    }
}

/// A batch and the time it reaches the aggregator.
#[derive(Debug, Clone, PartialEq)]
pub struct Arrival {
    pub arrival: f64,
    pub batch: MeasurementBatch,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub devices: Vec<DeviceSpec>,
    pub ground_truth: Vec<LabeledFrame>,
    /// All device batches ordered by arrival time.
    pub arrivals: Vec<Arrival>,
}

impl Scene {
    /// Digest of the encoded streams in arrival order.
    pub fn stream_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for a in &self.arrivals {
            h.write_u64(a.arrival.to_bits());
            h.write(&encode(&WireMessage::from_batch(&a.batch)));
        }
        h.finish()
    }

    pub fn device_stream(&self, id: u32) -> impl Iterator<Item = &Arrival> {
        self.arrivals.iter().filter(move |a| a.batch.device_id == id)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const SUBJECT_STREAM: u64 = 0x5u64 << 32;
const DEVICE_STREAM: u64 = 0xDu64 << 32;

/// Devices on a ring facing its centre. Angles follow the golden angle, so
/// the first `n` devices are the same whatever the total count.
pub fn ring_devices(cfg: &SceneConfig) -> Vec<DeviceSpec> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..cfg.n_devices as u32)
        .map(|id| {
            let mut rng = stream_rng(cfg.seed, DEVICE_STREAM + id as u64);
            let angle = id as f64 * golden;
            let phase = rng.random::<f64>() * cfg.phase_spread / cfg.frame_rate;
            DeviceSpec {
                id,
                origin: [
                    cfg.ring_radius * angle.cos(),
                    cfg.ring_radius * angle.sin(),
                    cfg.device_height,
                ],
                yaw: angle + PI,
                fov_deg: cfg.fov_deg,
                frame_rate: cfg.frame_rate,
                phase,
                latency_mean: cfg.latency_mean,
                latency_jitter: cfg.latency_jitter,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Wave {
    amp: f64,
    omega: f64,
    phase: f64,
}

impl Wave {
    fn at(&self, t: f64) -> f64 {
        self.amp * (self.omega * t + self.phase).sin()
    }

    fn peak_rate(&self) -> f64 {
        self.amp.abs() * self.omega
    }
}

#[derive(Debug, Clone)]
struct Subject {
    model: SkeletonModel,
    height: f64,
    start: Vector2<f64>,
    velocity: Vector2<f64>,
    sway: [[Wave; 2]; 2],
    base_z: f64,
    yaw0: f64,
    yaw_wave: Wave,
    joints: Vec<(f64, Wave)>,
}

impl Subject {
    fn q_at(&self, t: f64) -> DVector<f64> {
        let mut q = self.model.rest_q();
        let p = self.start + self.velocity * t;
        q[0] = p.x + self.sway[0][0].at(t) + self.sway[0][1].at(t);
        q[1] = p.y + self.sway[1][0].at(t) + self.sway[1][1].at(t);
        q[2] = self.base_z;
        q[3] = 0.0;
        q[4] = 0.0;
        q[5] = self.yaw0 + self.yaw_wave.at(t);
        for (k, (mid, wave)) in self.joints.iter().enumerate() {
            q[BASE_DOF_COUNT + k] = mid + wave.at(t);
        }
        q
    }
}

fn make_subject(template: &SkeletonModel, cfg: &SceneConfig, index: usize, anchor: Vector2<f64>) -> Subject {
    let mut rng = stream_rng(cfg.seed, SUBJECT_STREAM + index as u64);
    let mut model = template.clone();
    let height = rng.random_range(1.60..1.90);
    let s = height / template.nominal_height();
    for seg in template.segments() {
        let jitter = 1.0 + cfg.segment_jitter * rng.random_range(-1.0..1.0);
        model.set_segment_scale(seg, s * jitter).expect("segment from model");
    }

    let mut joints = Vec::new();
    for dof in &template.dofs()[BASE_DOF_COUNT..] {
        let range = dof.upper - dof.lower;
        let vmax = 0.8 * dof.velocity_upper.min(-dof.velocity_lower);
        let omega = rng.random_range(0.5..2.0);
        let mut amp = range * rng.random_range(0.05..0.2);
        amp = amp.min(0.6).min(vmax / omega);
        let lo = dof.lower + amp;
        let hi = dof.upper - amp;
        let centre = 0.5 * range * rng.random_range(-0.1..0.3);
        let mid = centre.clamp(lo, hi);
        if cfg.layout == Layout::Still {
            amp = 0.0;
        }
        joints.push((
            mid,
            Wave {
                amp,
                omega,
                phase: rng.random_range(0.0..TAU),
            },
        ));
    }

    // Lift the pelvis so the ankles sit just above the ground.
    let mut q = model.rest_q();
    q[2] = 0.0;
    let rest = model.forward_kinematics(q.as_slice()).expect("rest pose");
    let ankle = rest[KeypointLabel::LeftAnkle.index()]
        .z
        .min(rest[KeypointLabel::RightAnkle.index()].z);
    let base_z = -ankle + 0.039 * height;

    let mut sway = [[Wave {
        amp: 0.0,
        omega: 0.0,
        phase: 0.0,
    }; 2]; 2];
    let (start, velocity, yaw0, yaw_wave) = match cfg.layout {
        Layout::Wander => {
            let axis_speed = cfg.max_speed / 2f64.sqrt();
            for axis in &mut sway {
                for w in axis.iter_mut() {
                    *w = Wave {
                        amp: rng.random_range(0.1..0.3),
                        omega: rng.random_range(0.3..1.2),
                        phase: rng.random_range(0.0..TAU),
                    };
                }
                let rate: f64 = axis.iter().map(Wave::peak_rate).sum();
                if rate > axis_speed {
                    for w in axis.iter_mut() {
                        w.amp *= axis_speed / rate;
                    }
                }
            }
            let yaw_wave = Wave {
                amp: rng.random_range(0.2..0.8),
                omega: rng.random_range(0.2..0.6),
                phase: rng.random_range(0.0..TAU),
            };
            (anchor, Vector2::zeros(), rng.random_range(-PI..PI), yaw_wave)
        }
        Layout::Still => (anchor, Vector2::zeros(), rng.random_range(-PI..PI), sway[0][0]),
        Layout::Crossing => {
            let dir = if index == 0 { 1.0 } else { -1.0 };
            let half = 2.5;
            let lane = 0.35 * dir;
            let speed = 2.0 * half / cfg.duration;
            let yaw0 = if index == 0 { 0.0 } else { PI };
            (
                Vector2::new(-half * dir, lane),
                Vector2::new(speed * dir, 0.0),
                yaw0,
                Wave {
                    amp: 0.05,
                    omega: rng.random_range(0.5..1.0),
                    phase: rng.random_range(0.0..TAU),
                },
            )
        }
    };

    Subject {
        model,
        height,
        start,
        velocity,
        sway,
        base_z,
        yaw0,
        yaw_wave,
        joints,
    }
}

/// Anchor points on a hexagonal lattice around the origin, nearest first.
fn anchors(n: usize, spacing: f64) -> Vec<Vector2<f64>> {
    let mut pts = Vec::new();
    let r = (n as f64).sqrt().ceil() as i32 + 1;
    for i in -r..=r {
        for j in -r..=r {
            let x = spacing * (i as f64 + 0.5 * j as f64);
            let y = spacing * (j as f64 * 3f64.sqrt() / 2.0);
            pts.push(Vector2::new(x, y));
        }
    }
    pts.sort_by(|a, b| a.norm().total_cmp(&b.norm()).then(a.x.total_cmp(&b.x)).then(a.y.total_cmp(&b.y)));
    pts.truncate(n);
    pts
}

const BODY_RADIUS: f64 = 0.15;

// True when the body of `blocker` (a vertical cylinder about its pelvis)
// hides `p` from `eye`.
fn occluded(eye: &Vector3<f64>, p: &Vector3<f64>, blocker_axis: &Vector2<f64>, blocker_top: f64) -> bool {
    let d = p - eye;
    let d2 = Vector2::new(d.x, d.y);
    let len2 = d2.norm_squared();
    if len2 < 1e-12 {
        return false;
    }
    let rel = blocker_axis - Vector2::new(eye.x, eye.y);
    let s = rel.dot(&d2) / len2;
    if !(0.0..0.97).contains(&s) {
        return false;
    }
    let closest = Vector2::new(eye.x, eye.y) + d2 * s;
    let z = eye.z + d.z * s;
    (closest - blocker_axis).norm() < BODY_RADIUS && (0.0..=blocker_top).contains(&z)
}

// Far-side keypoints behind the torso: deeper than `SELF_DEPTH` past the body
// axis along the line of sight and within the torso's half-width of it.
const SELF_DEPTH: f64 = 0.05;
const TORSO_HALF_WIDTH: f64 = 0.2;

fn self_occluded(eye: &Vector3<f64>, p: &Vector3<f64>, axis: &Vector2<f64>) -> bool {
    let view = axis - Vector2::new(eye.x, eye.y);
    let len = view.norm();
    if len < 1e-9 {
        return false;
    }
    let v = view / len;
    let o = Vector2::new(p.x, p.y) - axis;
    let depth = o.dot(&v);
    let lateral = (o - v * depth).norm();
    depth > SELF_DEPTH && lateral < TORSO_HALF_WIDTH
}

fn check_ground_truth(model: &SkeletonModel, q: &DVector<f64>, prev: Option<(&DVector<f64>, f64)>) {
    assert!(model.within_limits(q.as_slice(), 1e-9), "generated pose leaves the joint limits");
    if let Some((p, dt)) = prev {
        for (d, dof) in model.dofs().iter().enumerate().skip(BASE_DOF_COUNT) {
            let v = (q[d] - p[d]) / dt;
            assert!(
                v <= dof.velocity_upper + 1e-9 && v >= dof.velocity_lower - 1e-9,
                "generated motion of `{}` exceeds its velocity limits",
                dof.name
            );
        }
    }
}

pub fn generate_scene(template: &SkeletonModel, cfg: &SceneConfig) -> Scene {
    cfg.validate().expect("scene configuration");
    let devices = if cfg.devices.is_empty() {
        ring_devices(cfg)
    } else {
        cfg.devices.clone()
    };
    let subjects: Vec<Subject> = anchors(cfg.n_subjects, 1.6)
        .into_iter()
        .enumerate()
        .map(|(i, a)| make_subject(template, cfg, i, a))
        .collect();

    let gt_frames = (cfg.duration * cfg.gt_rate).floor() as usize;
    let mut prev: Vec<Option<DVector<f64>>> = vec![None; subjects.len()];
    let mut ground_truth = Vec::with_capacity(gt_frames);
    for k in 0..gt_frames {
        let t = k as f64 / cfg.gt_rate;
        let skeletons = subjects
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let q = s.q_at(t);
                check_ground_truth(&s.model, &q, prev[i].as_ref().map(|p| (p, 1.0 / cfg.gt_rate)));
                let kp = s.model.forward_kinematics(q.as_slice()).expect("subject pose");
                prev[i] = Some(q);
                LabeledSkeleton {
                    id: i as u64,
                    keypoints: kp.map(Some),
                }
            })
            .collect();
        ground_truth.push(LabeledFrame { t, skeletons });
    }

    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("noise sigma"));
    let mut arrivals = Vec::new();
    for dev in &devices {
        let mut rng = stream_rng(cfg.seed, DEVICE_STREAM + 0x8000_0000 + dev.id as u64);
        let latency = Normal::new(dev.latency_mean, dev.latency_jitter.max(0.0)).expect("latency distribution");
        let eye = dev.origin();
        let frames = ((cfg.duration - dev.phase) * dev.frame_rate).ceil().max(0.0) as usize;
        for k in 0..frames {
            let t = dev.phase + k as f64 / dev.frame_rate;
            if t >= cfg.duration {
                break;
            }
            let poses: Vec<(Keypoints, Vector2<f64>, f64)> = subjects
                .iter()
                .map(|s| {
                    let q = s.q_at(t);
                    let kp = s.model.forward_kinematics(q.as_slice()).expect("subject pose");
                    (kp, Vector2::new(q[0], q[1]), s.height)
                })
                .collect();
            let timestamp_us = (t * 1e6).round() as u64;
            let mut measurements = Vec::new();
            for (i, (kp, _, _)) in poses.iter().enumerate() {
                let mut m = Measurement::empty(dev.id, timestamp_us);
                for label in KeypointLabel::ALL {
                    let p = kp[label.index()];
                    let visible = dev.sees(&p)
                        && !(cfg.self_occlusion && self_occluded(&eye, &p, &poses[i].1))
                        && !(cfg.occlusion
                            && poses
                                .iter()
                                .enumerate()
                                .any(|(j, (_, axis, h))| j != i && occluded(&eye, &p, axis, *h)));
                    if !visible || rng.random::<f64>() < cfg.dropout {
                        continue;
                    }
                    let mut obs = p;
                    if let Some(n) = &noise {
                        obs += Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
                    }
                    if rng.random::<f64>() < cfg.outlier_prob {
                        let dir = loop {
                            let v: Vector3<f64> = Vector3::new(
                                rng.random_range(-1.0..1.0),
                                rng.random_range(-1.0..1.0),
                                rng.random_range(-1.0..1.0),
                            );
                            let n2 = v.norm_squared();
                            if n2 > 1e-6 && n2 <= 1.0 {
                                break v / n2.sqrt();
                            }
                        };
                        let [lo, hi] = cfg.outlier_magnitude;
                        let mag = if hi > lo { rng.random_range(lo..hi) } else { lo };
                        obs += dir * mag;
                    }
                    let confidence = rng.random_range(0.5f32..=1.0);
                    m.set(label, obs, confidence);
                }
                if m.present_count() > 0 {
                    measurements.push(m);
                }
            }
            // Detection order carries no identity.
            for i in (1..measurements.len()).rev() {
                let j = rng.random_range(0..=i);
                measurements.swap(i, j);
            }
            let delay = if dev.latency_jitter > 0.0 {
                latency.sample(&mut rng).max(0.0)
            } else {
                dev.latency_mean.max(0.0)
            };
            arrivals.push(Arrival {
                arrival: t + delay,
                batch: MeasurementBatch {
                    device_id: dev.id,
                    timestamp_us,
                    measurements,
                },
            });
        }
    }
    arrivals.sort_by(|a, b| {
        a.arrival
            .total_cmp(&b.arrival)
            .then(a.batch.device_id.cmp(&b.batch.device_id))
            .then(a.batch.timestamp_us.cmp(&b.batch.timestamp_us))
    });

    Scene {
        devices,
        ground_truth,
        arrivals,
    }
}
