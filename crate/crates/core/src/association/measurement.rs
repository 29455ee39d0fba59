use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::skeleton::{KeypointLabel, Keypoints};

/// A single observed keypoint as carried on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointObservation {
    pub position: [f32; 3],
    pub confidence: f32,
}

impl KeypointObservation {
    pub fn new(position: Vector3<f64>, confidence: f32) -> Self {
        KeypointObservation {
            position: [position.x as f32, position.y as f32, position.z as f32],
            confidence,
        }
    }

    pub fn point(&self) -> Vector3<f64> {
        Vector3::new(
            self.position[0] as f64,
            self.position[1] as f64,
            self.position[2] as f64,
        )
    }
}

/// One device's labeled keypoint set for one person at one capture time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub device_id: u32,
    /// Capture time in microseconds.
    pub timestamp_us: u64,
    pub keypoints: [Option<KeypointObservation>; KeypointLabel::COUNT],
}

impl Measurement {
    pub fn empty(device_id: u32, timestamp_us: u64) -> Self {
        Measurement {
            device_id,
            timestamp_us,
            keypoints: [None; KeypointLabel::COUNT],
        }
    }

    /// All twelve keypoints present with confidence 1.
    pub fn from_keypoints(device_id: u32, timestamp_us: u64, points: &Keypoints) -> Self {
        let mut m = Self::empty(device_id, timestamp_us);
        for label in KeypointLabel::ALL {
            m.set(label, points[label.index()], 1.0);
        }
        m
    }

    /// Capture time in seconds.
    pub fn time(&self) -> f64 {
        self.timestamp_us as f64 * 1e-6
    }

    pub fn get(&self, label: KeypointLabel) -> Option<Vector3<f64>> {
        self.keypoints[label.index()].map(|k| k.point())
    }

    pub fn confidence(&self, label: KeypointLabel) -> Option<f32> {
        self.keypoints[label.index()].map(|k| k.confidence)
    }

    pub fn set(&mut self, label: KeypointLabel, position: Vector3<f64>, confidence: f32) {
        self.keypoints[label.index()] = Some(KeypointObservation::new(position, confidence));
    }

    pub fn remove(&mut self, label: KeypointLabel) {
        self.keypoints[label.index()] = None;
    }

    pub fn is_present(&self, label: KeypointLabel) -> bool {
        self.keypoints[label.index()].is_some()
    }

    pub fn present_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.is_some()).count()
    }

    pub fn present(&self) -> impl Iterator<Item = (KeypointLabel, Vector3<f64>)> + '_ {
        KeypointLabel::ALL
            .into_iter()
            .filter_map(|l| self.get(l).map(|p| (l, p)))
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        let n = self.present_count();
        (n > 0).then(|| self.present().map(|(_, p)| p).sum::<Vector3<f64>>() / n as f64)
    }

    /// Checks that present points are finite and confidences lie in `[0, 1]`.
    pub fn validate(&self) -> Result<(), String> {
        for (i, k) in self.keypoints.iter().enumerate() {
            if let Some(k) = k {
                if !k.position.iter().all(|v| v.is_finite()) {
                    return Err(format!("keypoint {} is not finite", KeypointLabel::ALL[i]));
                }
                if !(0.0..=1.0).contains(&k.confidence) {
                    return Err(format!("keypoint {} has confidence {}", KeypointLabel::ALL[i], k.confidence));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_get_remove() {
        let mut m = Measurement::empty(3, 1_500_000);
        assert_eq!(m.present_count(), 0);
        assert_eq!(m.centroid(), None);
        m.set(KeypointLabel::LeftKnee, Vector3::new(1.0, 2.0, 0.5), 0.8);
        m.set(KeypointLabel::RightKnee, Vector3::new(1.0, 0.0, 0.5), 0.8);
        assert_eq!(m.present_count(), 2);
        assert_eq!(m.centroid(), Some(Vector3::new(1.0, 1.0, 0.5)));
        assert_eq!(m.time(), 1.5);
        m.remove(KeypointLabel::LeftKnee);
        assert!(!m.is_present(KeypointLabel::LeftKnee));
        assert!(m.validate().is_ok());
    }

    #[test]
    fn validate_flags_bad_confidence() {
        let mut m = Measurement::empty(0, 0);
        m.set(KeypointLabel::LeftHip, Vector3::zeros(), 1.5);
        assert!(m.validate().is_err());
    }
}
