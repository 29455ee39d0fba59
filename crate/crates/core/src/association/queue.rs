use std::collections::BTreeMap;

use super::Measurement;

/// Everything one device reported for one capture instant.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBatch {
    pub device_id: u32,
    pub timestamp_us: u64,
    pub measurements: Vec<Measurement>,
}

impl MeasurementBatch {
    pub fn time(&self) -> f64 {
        self.timestamp_us as f64 * 1e-6
    }
}

/// Time-ordered buffer of incoming batches.
#[derive(Debug, Clone)]
pub struct SyncQueue {
    delta: f64,
    entries: Vec<MeasurementBatch>,
}

impl SyncQueue {
    pub fn new(delta: f64) -> Self {
        assert!(delta > 0.0, "staleness threshold must be positive");
        SyncQueue {
            delta,
            entries: Vec::new(),
        }
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, batch: MeasurementBatch) {
        let key = (batch.timestamp_us, batch.device_id);
        let at = self
            .entries
            .partition_point(|e| (e.timestamp_us, e.device_id) <= key);
        self.entries.insert(at, batch);
    }

    /// Newest capture time currently buffered, in seconds.
    pub fn newest(&self) -> Option<f64> {
        self.entries.last().map(MeasurementBatch::time)
    }

    /// Empty the queue, returning the newest fresh batch of each device.
    /// A batch is fresh when `t_a - t_X < delta`.
    pub fn drain_synchronized(&mut self, t_a: f64) -> BTreeMap<u32, MeasurementBatch> {
        let mut out: BTreeMap<u32, MeasurementBatch> = BTreeMap::new();
        for batch in self.entries.drain(..) {
            if t_a - batch.time() >= self.delta {
                continue;
            }
            // Entries are time ordered, so a later one replaces an earlier one.
            out.insert(batch.device_id, batch);
        }
        out
    }
}
