//! Measurement synchronization, gating and track bookkeeping.

mod measurement;
mod queue;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

pub use measurement::{KeypointObservation, Measurement};
pub use queue::{MeasurementBatch, SyncQueue};

use crate::assignment::min_cost_assignment;
use crate::ik::{self, IkConfig, IkTargets};
use crate::observer::{ObserverBank, ObserverConfig};
use crate::scaling::{ProportionTable, ScaleConfig, ScaleState};
use crate::skeleton::{KeypointLabel, Keypoints, SkeletonModel};

/// Cost used when a track and a measurement share no keypoint label.
pub const NO_OVERLAP_COST: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationConfig {
    /// Staleness threshold of the synchronization queue (s).
    pub delta: f64,
    /// Keypoints farther than this from their device are dropped (m).
    pub max_range: f64,
    /// Minimum number of valid keypoints for a measurement to be used.
    #[serde(rename = "k", alias = "min_keypoints")]
    pub min_keypoints: usize,
    /// Matches costing more than this are rejected (m).
    pub gate: f64,
    /// Tracks unseen for longer than this are removed (s).
    pub ttl: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        AssociationConfig {
            delta: 0.07,
            max_range: 8.0,
            min_keypoints: 4,
            gate: 1.0,
            ttl: 2.0,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.delta > 0.0) {
            return Err("association.delta must be positive".into());
        }
        if !(self.max_range > 0.0) {
            return Err("association.max_range must be positive".into());
        }
        if self.min_keypoints == 0 || self.min_keypoints > KeypointLabel::COUNT {
            return Err("association.min_keypoints must lie in 1..=12".into());
        }
        if !(self.gate > 0.0) {
            return Err("association.gate must be positive".into());
        }
        if !(self.ttl > 0.0) {
            return Err("association.ttl must be positive".into());
        }
        Ok(())
    }
}

/// Range-filter a measurement around its device and drop it entirely when
/// fewer than `min_keypoints` survive. Without a known origin only the
/// count check applies.
pub fn prefilter(
    m: &Measurement,
    max_range: f64,
    origin: Option<Vector3<f64>>,
    min_keypoints: usize,
) -> Option<Measurement> {
    let mut out = m.clone();
    if let Some(o) = origin {
        for (label, p) in m.present() {
            if (p - o).norm() > max_range {
                out.remove(label);
            }
        }
    }
    (out.present_count() >= min_keypoints).then_some(out)
}

/// Second-smallest value, or the smallest when only one is given.
pub fn kappa2(values: &[f64]) -> Option<f64> {
    let mut first = f64::INFINITY;
    let mut second = f64::INFINITY;
    for &v in values {
        if v < first {
            second = first;
            first = v;
        } else if v < second {
            second = v;
        }
    }
    match values.len() {
        0 => None,
        1 => Some(first),
        _ => Some(second),
    }
}

/// Association cost between a predicted skeleton and a measurement.
pub fn pair_cost(predicted: &Keypoints, m: &Measurement) -> f64 {
    let mut distances = [0.0; KeypointLabel::COUNT];
    let mut n = 0;
    for (label, p) in m.present() {
        distances[n] = (predicted[label.index()] - p).norm();
        n += 1;
    }
    kappa2(&distances[..n]).unwrap_or(NO_OVERLAP_COST)
}

/// `|tracks| x |measurements|` cost matrix.
pub fn cost_matrix(predicted: &[Keypoints], measurements: &[Measurement]) -> DMatrix<f64> {
    DMatrix::from_fn(predicted.len(), measurements.len(), |k, j| {
        pair_cost(&predicted[k], &measurements[j])
    })
}

/// Minimum-cost matching with pairs above `gate` removed.
pub fn assign(cost: &DMatrix<f64>, gate: f64) -> Vec<(usize, usize)> {
    min_cost_assignment(cost)
        .into_iter()
        .filter(|&(r, c)| cost[(r, c)] <= gate)
        .collect()
}

/// One tracked person.
#[derive(Debug, Clone)]
pub struct BodyTrack {
    pub id: u64,
    pub model: SkeletonModel,
    pub observers: ObserverBank,
    pub scale_state: ScaleState,
    /// Current filtered configuration.
    pub q: DVector<f64>,
    pub last_seen: f64,
    /// Ticks since creation.
    pub age: u64,
    /// Sources used in the most recent update.
    pub sources: usize,
    /// Largest IK residual of the most recent update (m).
    pub residual: f64,
    /// True when the last tick ran prediction only.
    pub coasting: bool,
}

impl BodyTrack {
    pub fn keypoints(&self) -> Keypoints {
        self.model
            .forward_kinematics(self.q.as_slice())
            .expect("track configuration matches its model")
    }

    pub fn covariance_trace(&self) -> f64 {
        self.observers.covariance_trace()
    }
}

/// Initial configuration for a newcomer: rest pose translated onto the
/// measurement centroid and turned to face along the shoulder (or hip)
/// line normal.
pub fn initial_configuration(model: &SkeletonModel, m: &Measurement) -> DVector<f64> {
    let mut q = model.rest_q();
    let across = [
        (KeypointLabel::LeftShoulder, KeypointLabel::RightShoulder),
        (KeypointLabel::LeftHip, KeypointLabel::RightHip),
    ]
    .iter()
    .find_map(|&(l, r)| Some(m.get(l)? - m.get(r)?));
    if let Some(v) = across {
        if v.x.hypot(v.y) > 1e-6 {
            q[5] = (-v.x).atan2(v.y);
        }
    }
    q[0] = 0.0;
    q[1] = 0.0;
    q[2] = 0.0;
    let rest = model
        .forward_kinematics(q.as_slice())
        .expect("rest configuration matches its model");
    let n = m.present_count();
    if n > 0 {
        let rest_centroid: Vector3<f64> = m.present().map(|(l, _)| rest[l.index()]).sum::<Vector3<f64>>() / n as f64;
        let centroid = m.centroid().expect("measurement has keypoints");
        let t = centroid - rest_centroid;
        q[0] = t.x;
        q[1] = t.y;
        q[2] = t.z;
    }
    q
}

/// Shared read-only inputs for creating and updating tracks.
#[derive(Debug, Clone)]
pub struct TrackContext {
    pub template: SkeletonModel,
    pub table: ProportionTable,
    pub scaling: ScaleConfig,
    pub ik: IkConfig,
    pub observer: ObserverConfig,
}

impl TrackContext {
    pub fn new(template: SkeletonModel) -> Self {
        TrackContext {
            template,
            table: ProportionTable::default_table(),
            scaling: ScaleConfig::default(),
            ik: IkConfig::default(),
            observer: ObserverConfig::default(),
        }
    }

    /// IK settings for a first fit, where there is no previous tick to
    /// bound the displacement against.
    pub fn bootstrap_ik(&self) -> IkConfig {
        IkConfig {
            velocity_limits: false,
            ..self.ik.clone()
        }
    }
}

/// Fit a fresh track to `measurements` (all from the same instant).
pub fn spawn_track(id: u64, measurements: &[Measurement], t_a: f64, ctx: &TrackContext) -> BodyTrack {
    let mut model = ctx.template.clone();
    let mut scale_state = ScaleState::new();
    scale_state.update_all(measurements, &ctx.table, &mut model, &ctx.scaling);
    let mut q = initial_configuration(&model, &measurements[0]);
    let targets = IkTargets::from_measurements(measurements);
    let mut residual = f64::NAN;
    match ik::solve_ik(&model, &q, &targets, &ctx.bootstrap_ik()) {
        Ok(r) => {
            residual = r.max_residual();
            q = r.q_new;
        }
        Err(e) => log::warn!("initial fit for track {id} failed: {e}"),
    }
    let q = model.clamp_to_limits(q.as_slice());
    BodyTrack {
        id,
        observers: ObserverBank::bootstrap(&model, q.as_slice(), t_a, &ctx.observer),
        model,
        scale_state,
        q,
        last_seen: t_a,
        age: 0,
        sources: measurements.len(),
        residual,
        coasting: false,
    }
}

/// Live tracks plus the id allocator.
#[derive(Debug, Clone, Default)]
pub struct TrackSet {
    tracks: Vec<BodyTrack>,
    next_id: u64,
}

impl TrackSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tracks(&self) -> &[BodyTrack] {
        &self.tracks
    }

    pub fn tracks_mut(&mut self) -> &mut Vec<BodyTrack> {
        &mut self.tracks
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    fn allocate(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Remove tracks unseen for longer than `ttl`.
    pub fn expire(&mut self, t_a: f64, ttl: f64) -> Vec<u64> {
        let mut removed = Vec::new();
        self.tracks.retain(|t| {
            let keep = t_a - t.last_seen <= ttl;
            if !keep {
                removed.push(t.id);
            }
            keep
        });
        removed
    }

    /// Spawn a track for one unmatched measurement; returns its index.
    pub fn spawn(&mut self, m: &Measurement, t_a: f64, min_keypoints: usize, ctx: &TrackContext) -> Option<usize> {
        if m.present_count() < min_keypoints {
            return None;
        }
        let id = self.allocate();
        self.tracks.push(spawn_track(id, std::slice::from_ref(m), t_a, ctx));
        Some(self.tracks.len() - 1)
    }
}

/// Create tracks for unmatched measurements and drop stale ones.
pub fn lifecycle(
    tracks: &mut TrackSet,
    unmatched: &[Measurement],
    t_a: f64,
    cfg: &AssociationConfig,
    ctx: &TrackContext,
) -> Vec<usize> {
    let spawned = unmatched
        .iter()
        .filter_map(|m| tracks.spawn(m, t_a, cfg.min_keypoints, ctx))
        .collect();
    tracks.expire(t_a, cfg.ttl);
    spawned
}

/// Result of associating one tick's measurements.
#[derive(Debug, Clone, Default)]
pub struct Associations {
    /// Measurements per track index (after spawning).
    pub per_track: BTreeMap<usize, Vec<Measurement>>,
    /// Indices of tracks created this tick.
    pub spawned: Vec<usize>,
}

/// Match every device's measurements against the live tracks, one device
/// at a time in ascending id order. Unmatched measurements spawn tracks
/// immediately, so later devices can attach to them within the same tick.
pub fn associate(
    tracks: &mut TrackSet,
    per_device: &BTreeMap<u32, Vec<Measurement>>,
    t_a: f64,
    cfg: &AssociationConfig,
    ctx: &TrackContext,
) -> Associations {
    let mut out = Associations::default();
    // Poses only change in the update stage, so each track's prediction is
    // computed once per tick and extended as tracks spawn.
    let mut predicted: Vec<Keypoints> = tracks.tracks().iter().map(BodyTrack::keypoints).collect();
    for measurements in per_device.values() {
        if measurements.is_empty() {
            continue;
        }
        predicted.extend(tracks.tracks()[predicted.len()..].iter().map(BodyTrack::keypoints));
        let cost = cost_matrix(&predicted, measurements);
        let pairs = assign(&cost, cfg.gate);
        let mut matched = vec![false; measurements.len()];
        for (k, j) in pairs {
            matched[j] = true;
            out.per_track.entry(k).or_default().push(measurements[j].clone());
        }
        for (j, m) in measurements.iter().enumerate() {
            if !matched[j] {
                if let Some(k) = tracks.spawn(m, t_a, cfg.min_keypoints, ctx) {
                    out.spawned.push(k);
                    out.per_track.entry(k).or_default().push(m.clone());
                }
            }
        }
    }
    out
}
