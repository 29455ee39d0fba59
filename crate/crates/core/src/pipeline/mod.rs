//! The aggregator: a synchronized queue feeding a fixed-rate tick that
//! associates measurements with tracks and updates every track.

mod live;
mod report;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::Vector3;
use parking_lot::Mutex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::{self, BodyTrack, Measurement, MeasurementBatch, SyncQueue, TrackContext, TrackSet};
use crate::config::{ConfigError, PipelineConfig};
use crate::harness::codec::{self, WireMessage};
use crate::harness::scene::{Arrival, DeviceSpec};
use crate::ik::{self, IkTargets};
use crate::metrics::{LabeledFrame, LabeledSkeleton};
use crate::observer::{self, ObserverBank};
use crate::scaling::reject_incompatible;
use crate::skeleton::KeypointLabel;

pub use live::{serve, LiveHandle};
pub use report::{LatencySummary, RunReport};

/// Wall time spent in each stage of one tick (ms).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageLatencies {
    pub drain: f64,
    pub prefilter: f64,
    pub associate: f64,
    pub update: f64,
    pub emit: f64,
    pub total: f64,
}

impl StageLatencies {
    pub const NAMES: [&'static str; 5] = ["drain", "prefilter", "associate", "update", "emit"];

    pub fn stages(&self) -> [f64; 5] {
        [self.drain, self.prefilter, self.associate, self.update, self.emit]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedTrack {
    pub id: u64,
    /// Forward kinematics of `q`, in label order (m).
    pub keypoints: [[f64; 3]; KeypointLabel::COUNT],
    pub q: Vec<f64>,
    /// Largest IK residual of the last update; absent before the first fit.
    pub residual: Option<f64>,
    pub sources: usize,
    pub coasting: bool,
    pub covariance_trace: f64,
}

/// Output of one tick. Stage latencies are diagnostic only and are not
/// serialized, so that replays produce identical files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusedFrame {
    pub t_a: f64,
    pub tracks: Vec<FusedTrack>,
    #[serde(skip)]
    pub latency: StageLatencies,
    /// Measurements that survived the prefilter this tick.
    #[serde(skip)]
    pub inputs: usize,
}

impl PartialEq for FusedFrame {
    fn eq(&self, other: &Self) -> bool {
        self.t_a == other.t_a && self.tracks == other.tracks
    }
}

impl FusedFrame {
    pub fn to_labeled(&self) -> LabeledFrame {
        LabeledFrame {
            t: self.t_a,
            skeletons: self
                .tracks
                .iter()
                .map(|t| LabeledSkeleton {
                    id: t.id,
                    keypoints: t.keypoints.map(|p| Some(Vector3::from(p))),
                })
                .collect(),
        }
    }
}

fn fused_track(t: &BodyTrack) -> FusedTrack {
    FusedTrack {
        id: t.id,
        keypoints: t.keypoints().map(|p| [p.x, p.y, p.z]),
        q: t.q.iter().copied().collect(),
        residual: t.residual.is_finite().then_some(t.residual),
        sources: t.sources,
        coasting: t.coasting,
        covariance_trace: t.covariance_trace(),
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    ctx: TrackContext,
    queue: Arc<Mutex<SyncQueue>>,
    tracks: TrackSet,
    origins: BTreeMap<u32, Vector3<f64>>,
    last_t_a: Option<f64>,
    pool: Option<rayon::ThreadPool>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let ctx = cfg.track_context()?;
        Ok(Self::with_context(cfg, ctx))
    }

    pub fn with_context(cfg: PipelineConfig, ctx: TrackContext) -> Self {
        let pool = (cfg.threads > 0).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .expect("thread pool")
        });
        Pipeline {
            queue: Arc::new(Mutex::new(SyncQueue::new(cfg.association.delta))),
            cfg,
            ctx,
            tracks: TrackSet::new(),
            origins: BTreeMap::new(),
            last_t_a: None,
            pool,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn context(&self) -> &TrackContext {
        &self.ctx
    }

    pub fn tracks(&self) -> &TrackSet {
        &self.tracks
    }

    pub fn last_tick(&self) -> Option<f64> {
        self.last_t_a
    }

    /// Register a device position for the range filter.
    pub fn set_device_origin(&mut self, device_id: u32, origin: Vector3<f64>) {
        self.origins.insert(device_id, origin);
    }

    pub fn set_devices(&mut self, devices: &[DeviceSpec]) {
        for d in devices {
            self.set_device_origin(d.id, d.origin());
        }
    }

    /// Shared handle for producers on other threads.
    pub fn queue(&self) -> Arc<Mutex<SyncQueue>> {
        Arc::clone(&self.queue)
    }

    pub fn push(&self, batch: MeasurementBatch) {
        self.queue.lock().push(batch);
    }

    /// Replay tick time: the newest buffered capture time when it is ahead
    /// of the previous tick, otherwise one period after it.
    pub fn replay_tick_time(&self) -> Option<f64> {
        let newest = self.queue.lock().newest();
        match (newest, self.last_t_a) {
            (Some(t), Some(prev)) if t > prev => Some(t),
            (_, Some(prev)) => Some(prev + self.cfg.tick_period()),
            (Some(t), None) => Some(t),
            (None, None) => None,
        }
    }

    /// Run one aggregator tick at time `t_a` (seconds). Tick times must
    /// increase; an earlier or equal time is nudged just past the last one.
    pub fn tick(&mut self, t_a: f64) -> FusedFrame {
        let t_a = match self.last_t_a {
            Some(prev) if t_a <= prev => prev + 1e-6,
            _ => t_a,
        };
        self.last_t_a = Some(t_a);
        let start = Instant::now();
        let ms_since = |t: Instant| t.elapsed().as_secs_f64() * 1e3;

        let drained = self.queue.lock().drain_synchronized(t_a);
        let t_drain = Instant::now();

        let a = &self.cfg.association;
        let per_device: BTreeMap<u32, Vec<Measurement>> = drained
            .into_iter()
            .map(|(device, batch)| {
                let origin = self.origins.get(&device).copied();
                let kept = batch
                    .measurements
                    .iter()
                    .filter_map(|m| association::prefilter(m, a.max_range, origin, a.min_keypoints))
                    .collect();
                (device, kept)
            })
            .collect();
        let inputs_count = per_device.values().map(Vec::len).sum();
        let t_prefilter = Instant::now();

        let mut assoc = association::associate(&mut self.tracks, &per_device, t_a, a, &self.ctx);
        let t_associate = Instant::now();

        let inputs: Vec<Option<Vec<Measurement>>> = (0..self.tracks.len()).map(|k| assoc.per_track.remove(&k)).collect();
        let ctx = &self.ctx;
        let k = a.min_keypoints;
        let tracks = self.tracks.tracks_mut();
        let run = || {
            tracks
                .par_iter_mut()
                .zip(inputs.into_par_iter())
                .for_each(|(track, ms)| update_track(track, ms.as_deref(), t_a, ctx, k));
        };
        match &self.pool {
            Some(pool) => pool.install(run),
            None => run(),
        }
        // Tracks with data this tick were refreshed above, so only stale
        // unmatched tracks can expire here.
        self.tracks.expire(t_a, a.ttl);
        let t_update = Instant::now();

        let tracks: Vec<FusedTrack> = self.tracks.tracks().iter().map(fused_track).collect();
        debug_assert!(self
            .tracks
            .tracks()
            .iter()
            .all(|t| t.model.within_limits(t.q.as_slice(), 1e-9)));
        let t_emit = Instant::now();

        let span = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
        FusedFrame {
            t_a,
            tracks,
            inputs: inputs_count,
            latency: StageLatencies {
                drain: span(start, t_drain),
                prefilter: span(t_drain, t_prefilter),
                associate: span(t_prefilter, t_associate),
                update: span(t_associate, t_update),
                emit: span(t_update, t_emit),
                total: ms_since(start),
            },
        }
    }
}

fn coast(track: &mut BodyTrack, dt: f64, ctx: &TrackContext) {
    observer::coast_track(track, dt, &ctx.observer);
    track.coasting = true;
    track.sources = 0;
}

// Scale, reject, fit and filter one track against its measurements, or
// coast it on prediction when there are none.
fn update_track(track: &mut BodyTrack, ms: Option<&[Measurement]>, t_a: f64, ctx: &TrackContext, k: usize) {
    let dt = t_a - track.observers.last_update();
    let fresh = track.age == 0;
    track.age += 1;
    let Some(ms) = ms else {
        if dt > 0.0 {
            coast(track, dt, ctx);
        }
        return;
    };
    // A track spawned this tick was already scaled and fitted on its
    // first measurement.
    let unseen = if fresh { &ms[1..] } else { ms };
    track
        .scale_state
        .update_all(unseen, &ctx.table, &mut track.model, &ctx.scaling);
    let kept: Vec<Measurement> = ms
        .iter()
        .map(|m| reject_incompatible(m, &track.model, &ctx.table, ctx.scaling.reject_tolerance))
        .filter(|m| m.present_count() >= k)
        .collect();
    if kept.is_empty() {
        if !fresh && dt > 0.0 {
            coast(track, dt, ctx);
        }
        return;
    }
    track.last_seen = t_a;
    let targets = IkTargets::from_measurements(&kept);

    if fresh {
        if ms.len() > 1 {
            match ik::solve_ik(&track.model, &track.q, &targets, &ctx.bootstrap_ik()) {
                Ok(r) => {
                    track.residual = r.max_residual();
                    track.q = track.model.clamp_to_limits(r.q_new.as_slice());
                    track.sources = kept.len();
                    track.observers = ObserverBank::bootstrap(&track.model, track.q.as_slice(), t_a, &ctx.observer);
                }
                Err(e) => log::debug!("refit of new track {} failed: {e}", track.id),
            }
        }
        return;
    }

    let mut cfg = ctx.ik.clone();
    cfg.step_dt = dt;
    match ik::solve_ik(&track.model, &track.q, &targets, &cfg) {
        Ok(r) => {
            track.residual = r.max_residual();
            track.sources = kept.len();
            track.coasting = false;
            observer::step_track(track, r.q_new.as_slice(), dt, &ctx.observer);
        }
        Err(e) => {
            log::debug!("track {} coasts, IK failed: {e}", track.id);
            coast(track, dt, ctx);
        }
    }
}

/// How a recorded stream is fed to the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Feed {
    /// Batches are pushed as they are.
    #[default]
    Direct,
    /// Batches go through the binary codec first, as in live operation.
    Wire,
}

/// Deterministic replay.
///
/// The recorded stream is played against a simulated aggregator clock.
/// Tick `k` covers captures up to `c_k = t_0 + k / tick_rate`, where `t_0`
/// is the earliest capture, and fires at arrival time `c_k + replay_lag`:
/// a batch is delivered at the first tick whose window contains its capture
/// time and by which it has arrived. Late batches simply slip to a later
/// tick. Each tick runs at the replay tick time (newest buffered capture).
/// Runs until every batch is delivered and one final tick has drained the
/// queue.
pub fn replay(pipeline: &mut Pipeline, arrivals: &[Arrival], feed: Feed, mut sink: impl FnMut(&FusedFrame)) -> RunReport {
    let mut report = RunReport::new(pipeline.config().latency_budget_ms);
    let Some(t0) = arrivals.iter().map(|a| a.batch.time()).min_by(f64::total_cmp) else {
        return report;
    };
    let period = pipeline.config().tick_period();
    let lag = pipeline.config().replay_lag_ms * 1e-3;
    let wall = Instant::now();
    let mut next = 0;
    let mut pending: Vec<&MeasurementBatch> = Vec::new();
    for k in 0u64.. {
        let window = t0 + k as f64 * period;
        while next < arrivals.len() && arrivals[next].arrival <= window + lag {
            pending.push(&arrivals[next].batch);
            next += 1;
        }
        let mut delivered = 0;
        pending.retain(|batch| {
            // Capture stamps are whole microseconds.
            if batch.time() > window + 1e-6 {
                return true;
            }
            match feed {
                Feed::Direct => pipeline.push((*batch).clone()),
                Feed::Wire => {
                    let bytes = codec::encode(&WireMessage::from_batch(batch));
                    let (msg, _) = codec::decode(&bytes).expect("codec round trip");
                    pipeline.push(msg.into_batch());
                }
            }
            delivered += 1;
            false
        });
        if delivered == 0 && pipeline.last_tick().is_none() {
            continue;
        }
        let t_a = pipeline.replay_tick_time().expect("data or a previous tick");
        let frame = pipeline.tick(t_a);
        report.record(&frame);
        sink(&frame);
        if next == arrivals.len() && pending.is_empty() {
            break;
        }
    }
    report.finish(wall.elapsed().as_secs_f64(), pipeline.tracks().next_id());
    report
}
