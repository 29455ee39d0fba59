use serde::Serialize;

use super::{FusedFrame, StageLatencies};

/// Percentiles of one latency series (ms).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LatencySummary {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

impl LatencySummary {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        // Nearest-rank percentile.
        let pct = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        LatencySummary {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p50: pct(0.50),
            p95: pct(0.95),
            p99: pct(0.99),
            max: s[s.len() - 1],
        }
    }
}

/// Summary of a run: tick latencies per stage, throughput and budget misses.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub ticks: usize,
    pub frames_with_tracks: usize,
    pub tracks_created: u64,
    pub measurements: usize,
    pub budget_ms: f64,
    pub budget_misses: usize,
    pub wall_seconds: f64,
    /// Ticks per second of pure processing time.
    pub throughput_hz: f64,
    pub total: LatencySummary,
    pub stages: Vec<(String, LatencySummary)>,
    #[serde(skip)]
    samples: Vec<StageLatencies>,
    #[serde(skip)]
    inputs: Vec<usize>,
}

impl RunReport {
    pub fn new(budget_ms: f64) -> Self {
        RunReport {
            ticks: 0,
            frames_with_tracks: 0,
            tracks_created: 0,
            measurements: 0,
            budget_ms,
            budget_misses: 0,
            wall_seconds: 0.0,
            throughput_hz: 0.0,
            total: LatencySummary::default(),
            stages: Vec::new(),
            samples: Vec::new(),
            inputs: Vec::new(),
        }
    }

    pub fn record(&mut self, frame: &FusedFrame) {
        self.ticks += 1;
        self.frames_with_tracks += !frame.tracks.is_empty() as usize;
        self.measurements += frame.inputs;
        self.budget_misses += (frame.latency.total > self.budget_ms) as usize;
        self.samples.push(frame.latency);
        self.inputs.push(frame.inputs);
    }

    /// Compute the summaries once the run is over.
    pub fn finish(&mut self, wall_seconds: f64, tracks_created: u64) {
        self.wall_seconds = wall_seconds;
        self.tracks_created = tracks_created;
        let totals: Vec<f64> = self.samples.iter().map(|s| s.total).collect();
        self.total = LatencySummary::from_samples(&totals);
        let busy: f64 = totals.iter().sum::<f64>() * 1e-3;
        self.throughput_hz = if busy > 0.0 { self.ticks as f64 / busy } else { 0.0 };
        self.stages = StageLatencies::NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let series: Vec<f64> = self.samples.iter().map(|s| s.stages()[i]).collect();
                (name.to_string(), LatencySummary::from_samples(&series))
            })
            .collect();
    }

    /// Per-tick `(measurements, total latency ms)` pairs.
    pub fn tick_samples(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.inputs.iter().copied().zip(self.samples.iter().map(|s| s.total))
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "ticks {}  tracks created {}  measurements {}\n\
             wall {:.2} s  throughput {:.1} ticks/s  budget {:.0} ms, missed {}\n",
            self.ticks,
            self.tracks_created,
            self.measurements,
            self.wall_seconds,
            self.throughput_hz,
            self.budget_ms,
            self.budget_misses
        );
        out.push_str(&format!(
            "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "stage (ms)", "mean", "p50", "p95", "p99", "max"
        ));
        let row = |name: &str, s: &LatencySummary| {
            format!(
                "{:<10} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}\n",
                name, s.mean, s.p50, s.p95, s.p99, s.max
            )
        };
        for (name, s) in &self.stages {
            out.push_str(&row(name, s));
        }
        out.push_str(&row("total", &self.total));
        out
    }
}
