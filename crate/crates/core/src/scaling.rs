//! Subject height estimation, per-segment scale tracking and bone-length
//! outlier rejection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::association::Measurement;
use crate::skeleton::{KeypointLabel, SkeletonError, SkeletonModel};

pub const DEFAULT_PROPORTIONS: &str = include_str!("../profiles/proportions.toml");

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    /// Expected length as a fraction of stature.
    pub fraction: f64,
    /// Keypoints at the two ends when the segment is directly observable.
    pub endpoints: Option<(KeypointLabel, KeypointLabel)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProportionTable {
    segments: Vec<Segment>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TableDocument {
    version: u32,
    segments: Vec<SegmentDocument>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentDocument {
    name: String,
    fraction: f64,
    endpoints: Option<[String; 2]>,
}

impl ProportionTable {
    pub fn default_table() -> Self {
        Self::from_toml_str(DEFAULT_PROPORTIONS).expect("bundled proportion table is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SkeletonError> {
        let doc: TableDocument = toml::from_str(text).map_err(|e| SkeletonError::Parse(e.to_string()))?;
        if doc.version != 1 {
            return Err(SkeletonError::Invalid {
                path: "version".into(),
                reason: format!("unsupported version {}", doc.version),
            });
        }
        let mut segments = Vec::with_capacity(doc.segments.len());
        for (i, s) in doc.segments.into_iter().enumerate() {
            let path = format!("segments[{i}]");
            if !(s.fraction > 0.0 && s.fraction < 1.0) {
                return Err(SkeletonError::Invalid {
                    path: format!("{path}.fraction"),
                    reason: "must lie in (0, 1)".into(),
                });
            }
            let endpoints = match s.endpoints {
                None => None,
                Some([a, b]) => {
                    let la = KeypointLabel::from_name(&a).ok_or(SkeletonError::UnknownLabel(a))?;
                    let lb = KeypointLabel::from_name(&b).ok_or(SkeletonError::UnknownLabel(b))?;
                    Some((la, lb))
                }
            };
            segments.push(Segment {
                name: s.name,
                fraction: s.fraction,
                endpoints,
            });
        }
        for s in &segments {
            if let Some(rest) = s.name.strip_prefix("l_") {
                let mirror = format!("r_{rest}");
                if let Some(m) = segments.iter().find(|m| m.name == mirror) {
                    if m.fraction != s.fraction {
                        return Err(SkeletonError::Invalid {
                            path: format!("segments.{mirror}"),
                            reason: format!("fraction differs from `{}`", s.name),
                        });
                    }
                }
            }
        }
        Ok(ProportionTable { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Segments spanned by two tracked keypoints.
    pub fn connected(&self) -> impl Iterator<Item = (&Segment, KeypointLabel, KeypointLabel)> {
        self.segments
            .iter()
            .filter_map(|s| s.endpoints.map(|(a, b)| (s, a, b)))
    }
}

/// Per-pair height estimates `distance / fraction` for every connected pair
/// present in `m`.
pub fn height_samples(m: &Measurement, table: &ProportionTable) -> Vec<f64> {
    table
        .connected()
        .filter_map(|(s, a, b)| Some((m.get(a)? - m.get(b)?).norm() / s.fraction))
        .collect()
}

/// Median of the per-pair height estimates, or `None` without a connected
/// pair. The median keeps one displaced keypoint from skewing the estimate.
pub fn estimate_height(m: &Measurement, table: &ProportionTable) -> Option<f64> {
    median(height_samples(m, table))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleConfig {
    /// Half-width of the per-segment band around the average scale.
    pub band: f64,
    /// Relative bone-length deviation beyond which a bone is incompatible.
    pub reject_tolerance: f64,
    /// Connected pairs required before a height estimate updates the average.
    pub min_pairs: usize,
    /// Bone observations deviating from the measurement's own median scale
    /// by more than this fraction are not folded into the segment history.
    pub observation_gate: f64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig {
            band: 0.05,
            reject_tolerance: 0.2,
            min_pairs: 2,
            observation_gate: 0.5,
        }
    }
}

impl ScaleConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.band >= 0.0 && self.band < 1.0) {
            return Err("scaling.band must lie in [0, 1)".into());
        }
        if !(self.reject_tolerance > 0.0 && self.reject_tolerance.is_finite()) {
            return Err("scaling.reject_tolerance must be positive".into());
        }
        if !(self.observation_gate > 0.0) {
            return Err("scaling.observation_gate must be positive".into());
        }
        if self.min_pairs == 0 {
            return Err("scaling.min_pairs must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct SegmentHistory {
    sum: f64,
    count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleState {
    s_avg: f64,
    sum: f64,
    history_count: u64,
    per_bone: BTreeMap<String, f64>,
    observed: BTreeMap<String, SegmentHistory>,
}

impl Default for ScaleState {
    fn default() -> Self {
        ScaleState {
            s_avg: 1.0,
            sum: 0.0,
            history_count: 0,
            per_bone: BTreeMap::new(),
            observed: BTreeMap::new(),
        }
    }
}

impl ScaleState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn s_avg(&self) -> f64 {
        self.s_avg
    }

    pub fn history_count(&self) -> u64 {
        self.history_count
    }

    pub fn per_bone(&self) -> &BTreeMap<String, f64> {
        &self.per_bone
    }

    /// Fold one measurement into the running scales and write the result
    /// into `model`'s bone scales.
    pub fn update(&mut self, m: &Measurement, table: &ProportionTable, model: &mut SkeletonModel, cfg: &ScaleConfig) {
        if self.observe(m, table, model.nominal_height(), cfg) {
            self.apply(table, model, cfg);
        }
    }

    /// Fold several measurements in, writing the model once at the end.
    /// Same result as calling [`ScaleState::update`] on each in turn.
    pub fn update_all<'a>(
        &mut self,
        ms: impl IntoIterator<Item = &'a Measurement>,
        table: &ProportionTable,
        model: &mut SkeletonModel,
        cfg: &ScaleConfig,
    ) {
        let nominal = model.nominal_height();
        let mut any = false;
        for m in ms {
            any |= self.observe(m, table, nominal, cfg);
        }
        if any {
            self.apply(table, model, cfg);
        }
    }

    // Returns false when `m` has no connected pair and nothing changed.
    fn observe(&mut self, m: &Measurement, table: &ProportionTable, nominal: f64, cfg: &ScaleConfig) -> bool {
        let samples = height_samples(m, table);
        let pairs = samples.len();
        let Some(h) = median(samples) else {
            return false;
        };
        let reference = h / nominal;
        if pairs >= cfg.min_pairs {
            self.sum += reference;
            self.history_count += 1;
            self.s_avg = self.sum / self.history_count as f64;
        }

        for (s, a, b) in table.connected() {
            if let (Some(pa), Some(pb)) = (m.get(a), m.get(b)) {
                let observed = (pa - pb).norm() / (s.fraction * nominal);
                // Grossly implausible lengths are displaced keypoints, not anatomy.
                if (observed / reference - 1.0).abs() > cfg.observation_gate {
                    continue;
                }
                let h = match self.observed.get_mut(&s.name) {
                    Some(h) => h,
                    None => self.observed.entry(s.name.clone()).or_default(),
                };
                h.sum += observed;
                h.count += 1;
            }
        }
        true
    }

    fn apply(&mut self, table: &ProportionTable, model: &mut SkeletonModel, cfg: &ScaleConfig) {
        let lo = self.s_avg * (1.0 - cfg.band);
        let hi = self.s_avg * (1.0 + cfg.band);
        for s in table.segments() {
            let raw = match self.observed.get(&s.name) {
                Some(h) if h.count > 0 => h.sum / h.count as f64,
                _ => self.s_avg,
            };
            let scale = raw.clamp(lo, hi);
            match self.per_bone.get_mut(&s.name) {
                Some(v) => *v = scale,
                None => {
                    self.per_bone.insert(s.name.clone(), scale);
                }
            }
            if model.segment_length(&s.name).is_some() {
                model
                    .set_segment_scale(&s.name, scale)
                    .expect("segment exists in model");
            }
        }
    }
}

/// Drop keypoints whose every incident observed bone is incompatible with
/// the model's current segment lengths.
///
/// Keypoints joined to two or more observed bones are pruned first, one
/// sweep at a time, so that a single displaced joint does not take its
/// neighbours with it. Remaining keypoints are then checked against the
/// survivors in one simultaneous pass.
pub fn reject_incompatible(m: &Measurement, model: &SkeletonModel, table: &ProportionTable, tol: f64) -> Measurement {
    let bones: Vec<(KeypointLabel, KeypointLabel, bool)> = table
        .connected()
        .filter_map(|(s, a, b)| {
            let expected = model.segment_length(&s.name)?;
            let (pa, pb) = (m.get(a)?, m.get(b)?);
            let d = (pa - pb).norm();
            let ok = expected > 0.0 && ((d - expected) / expected).abs() <= tol;
            Some((a, b, ok))
        })
        .collect();

    let mut alive = [false; KeypointLabel::COUNT];
    for label in KeypointLabel::ALL {
        alive[label.index()] = m.is_present(label);
    }
    let incident = |alive: &[bool; KeypointLabel::COUNT], k: KeypointLabel| {
        let mut total = 0usize;
        let mut good = 0usize;
        for &(a, b, ok) in &bones {
            let other = if a == k {
                b
            } else if b == k {
                a
            } else {
                continue;
            };
            if alive[other.index()] {
                total += 1;
                good += ok as usize;
            }
        }
        (total, good)
    };

    loop {
        let doomed: Vec<KeypointLabel> = KeypointLabel::ALL
            .into_iter()
            .filter(|&k| alive[k.index()])
            .filter(|&k| {
                let (total, good) = incident(&alive, k);
                total >= 2 && good == 0
            })
            .collect();
        if doomed.is_empty() {
            break;
        }
        for k in doomed {
            alive[k.index()] = false;
        }
    }
    let doomed: Vec<KeypointLabel> = KeypointLabel::ALL
        .into_iter()
        .filter(|&k| alive[k.index()])
        .filter(|&k| {
            let (total, good) = incident(&alive, k);
            total >= 1 && good == 0
        })
        .collect();
    for k in doomed {
        alive[k.index()] = false;
    }

    let mut out = m.clone();
    for label in KeypointLabel::ALL {
        if !alive[label.index()] {
            out.remove(label);
        }
    }
    out
}
