//! Skeleton similarity and the α-integrated DetA / LocA / AssA / HOTA
//! tracking scores.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::min_cost_assignment;
use crate::skeleton::KeypointLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSkeleton {
    pub id: u64,
    pub keypoints: [Option<Vector3<f64>>; KeypointLabel::COUNT],
}

impl LabeledSkeleton {
    pub fn present_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFrame {
    pub t: f64,
    pub skeletons: Vec<LabeledSkeleton>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("ground-truth sequence is empty; metrics are undefined")]
    EmptyGroundTruth,
    #[error("alpha grid must be non-empty with values in (0, 1)")]
    BadAlphaGrid,
}

/// `max(0, 1 - mean distance)` over keypoints present in both; 0 when
/// nothing is shared.
pub fn similarity(pr: &LabeledSkeleton, gt: &LabeledSkeleton) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in pr.keypoints.iter().zip(&gt.keypoints) {
        if let (Some(a), Some(b)) = (a, b) {
            sum += (a - b).norm();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (1.0 - sum / n as f64).max(0.0)
    }
}

/// The standard 19-point grid 0.05, 0.10, ..., 0.95.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Similarity-maximizing bijection between predictions and ground truth,
/// as `(pr index, gt index, S)`.
pub fn best_matching(prs: &[LabeledSkeleton], gts: &[LabeledSkeleton]) -> Vec<(usize, usize, f64)> {
    if prs.is_empty() || gts.is_empty() {
        return Vec::new();
    }
    let sim = DMatrix::from_fn(prs.len(), gts.len(), |i, j| similarity(&prs[i], &gts[j]));
    min_cost_assignment(&(-&sim))
        .into_iter()
        .map(|(i, j)| (i, j, sim[(i, j)]))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    /// `(pr index, gt index, S)` of every true positive.
    pub tp: Vec<(usize, usize, f64)>,
    pub fp: usize,
    pub fn_: usize,
}

/// Threshold a frame's best matching at `alpha`.
pub fn match_frame(prs: &[LabeledSkeleton], gts: &[LabeledSkeleton], alpha: f64) -> FrameMatch {
    let tp: Vec<_> = best_matching(prs, gts)
        .into_iter()
        .filter(|&(_, _, s)| s > alpha)
        .collect();
    FrameMatch {
        fp: prs.len() - tp.len(),
        fn_: gts.len() - tp.len(),
        tp,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub det_a: f64,
    pub ass_a: f64,
    pub loc_a: f64,
    pub hota: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub det_a: f64,
    pub ass_a: f64,
    pub loc_a: f64,
    pub hota: f64,
    pub per_alpha: Vec<AlphaRow>,
    /// Ground-truth frames with an aligned prediction frame.
    pub aligned_frames: usize,
    pub gt_frames: usize,
}

/// Pair each ground-truth frame with the nearest prediction frame within
/// `tolerance` seconds. Prediction frames must be sorted by time.
pub fn align<'a>(
    pred: &'a [LabeledFrame],
    gt: &'a [LabeledFrame],
    tolerance: f64,
) -> Vec<(&'a LabeledFrame, Option<&'a LabeledFrame>)> {
    gt.iter()
        .map(|g| {
            let at = pred.partition_point(|p| p.t < g.t);
            let candidates = [at.checked_sub(1), Some(at)];
            let best = candidates
                .into_iter()
                .flatten()
                .filter_map(|i| pred.get(i))
                .filter(|p| (p.t - g.t).abs() <= tolerance)
                .min_by(|a, b| (a.t - g.t).abs().total_cmp(&(b.t - g.t).abs()));
            (g, best)
        })
        .collect()
}

/// Score `pred` against `gt`. Frames are aligned nearest-neighbour within
/// `tolerance` seconds; unaligned prediction frames are ignored.
/// Ground-truth skeletons without any keypoint are not counted.
pub fn evaluate(
    pred: &[LabeledFrame],
    gt: &[LabeledFrame],
    alphas: &[f64],
    tolerance: f64,
) -> Result<MetricReport, MetricsError> {
    if gt.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(MetricsError::BadAlphaGrid);
    }
    let mut pred_sorted: Vec<LabeledFrame> = pred.to_vec();
    pred_sorted.sort_by(|a, b| a.t.total_cmp(&b.t));
    let pairs = align(&pred_sorted, gt, tolerance);

    // Matching maximizes total similarity independently of α, so it is
    // computed once per frame.
    struct FrameData {
        pr_ids: Vec<u64>,
        gt_ids: Vec<u64>,
        matches: Vec<(usize, usize, f64)>,
    }
    let empty: Vec<LabeledSkeleton> = Vec::new();
    let mut frames = Vec::with_capacity(pairs.len());
    let mut pr_count: BTreeMap<u64, usize> = BTreeMap::new();
    let mut gt_count: BTreeMap<u64, usize> = BTreeMap::new();
    let mut aligned = 0;
    for (g, p) in &pairs {
        let gts: Vec<LabeledSkeleton> = g.skeletons.iter().filter(|s| s.present_count() > 0).cloned().collect();
        let prs = p.map_or(&empty, |p| &p.skeletons);
        aligned += p.is_some() as usize;
        for s in prs {
            *pr_count.entry(s.id).or_default() += 1;
        }
        for s in &gts {
            *gt_count.entry(s.id).or_default() += 1;
        }
        frames.push(FrameData {
            pr_ids: prs.iter().map(|s| s.id).collect(),
            gt_ids: gts.iter().map(|s| s.id).collect(),
            matches: best_matching(prs, &gts),
        });
    }
    let total_pr: usize = pr_count.values().sum();
    let total_gt: usize = gt_count.values().sum();

    let mut per_alpha = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut tp = 0usize;
        let mut sim_sum = 0.0;
        let mut tpa: BTreeMap<(u64, u64), usize> = BTreeMap::new();
        for f in &frames {
            for &(i, j, s) in &f.matches {
                if s > alpha {
                    tp += 1;
                    sim_sum += s;
                    *tpa.entry((f.pr_ids[i], f.gt_ids[j])).or_default() += 1;
                }
            }
        }
        let fp = total_pr - tp;
        let fn_ = total_gt - tp;
        let det_a = if tp + fp + fn_ > 0 {
            tp as f64 / (tp + fp + fn_) as f64
        } else {
            0.0
        };
        let (loc_a, ass_a) = if tp == 0 {
            (0.0, 0.0)
        } else {
            let mut ass = 0.0;
            for (&(p, g), &n) in &tpa {
                let denom = pr_count[&p] + gt_count[&g] - n;
                ass += n as f64 * (n as f64 / denom as f64);
            }
            (sim_sum / tp as f64, ass / tp as f64)
        };
        per_alpha.push(AlphaRow {
            alpha,
            det_a,
            ass_a,
            loc_a,
            hota: (det_a * ass_a).sqrt(),
            tp,
            fp,
            fn_,
        });
    }
    let mean = |f: fn(&AlphaRow) -> f64| per_alpha.iter().map(f).sum::<f64>() / per_alpha.len() as f64;
    Ok(MetricReport {
        det_a: mean(|r| r.det_a),
        ass_a: mean(|r| r.ass_a),
        loc_a: mean(|r| r.loc_a),
        hota: mean(|r| r.hota),
        aligned_frames: aligned,
        gt_frames: gt.len(),
        per_alpha,
    })
}
