//! Slow, obviously-correct references.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Vector3};
use posefuse_core::metrics::LabeledFrame;
use posefuse_core::QpProblem;

// ---------------------------------------------------------------------------
// QP: augmented Lagrangian on the equalities, accelerated projected
// gradient with adaptive restart on the box subproblems.

pub fn qp_projected_gradient(p: &QpProblem, tol: f64) -> DVector<f64> {
    let n = p.dim();
    let h = p.hessian();
    let g = p.linear();
    let a = p.eq_matrix();
    let b = p.eq_rhs();
    let (lo, hi) = (p.lower(), p.upper());
    let project = |x: &DVector<f64>| DVector::from_fn(n, |i, _| x[i].clamp(lo[i], hi[i]));

    let top = |m: &DMatrix<f64>| m.symmetric_eigenvalues().max();
    let lh = top(h);
    let ata = a.transpose() * a;
    let rho = if a.nrows() > 0 { 10.0 * lh / top(&ata).max(1e-12) } else { 0.0 };
    let hess = h + &ata * rho;
    let step = 1.0 / top(&hess);

    let mut lambda = DVector::zeros(a.nrows());
    let mut x = project(&DVector::zeros(n));
    for _outer in 0..2000 {
        // min ½xᵀHx + gᵀx + λᵀ(Ax − b) + ρ/2 |Ax − b|² over the box.
        let lin = g + a.transpose() * (&lambda - b * rho);
        let grad = |x: &DVector<f64>| &hess * x + &lin;
        let mut y = x.clone();
        let mut t = 1.0f64;
        for _ in 0..200_000 {
            let next = project(&(&y - grad(&y) * step));
            let moved = (&next - &x).amax();
            // Restart the momentum whenever it points uphill.
            if (&y - &next).dot(&(&next - &x)) > 0.0 {
                t = 1.0;
                y = next.clone();
            } else {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                y = &next + (&next - &x) * ((t - 1.0) / t_next);
                t = t_next;
            }
            x = next;
            if moved < tol * 1e-2 {
                break;
            }
        }
        if a.nrows() == 0 {
            break;
        }
        let r = a * &x - b;
        lambda += &r * rho;
        if r.amax() < tol {
            break;
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Assignment by enumerating every injective map of the smaller side.

pub fn brute_assignment_cost(cost: &DMatrix<f64>) -> f64 {
    let (r, c) = cost.shape();
    if r == 0 || c == 0 {
        return 0.0;
    }
    let transposed = r > c;
    let m = if transposed { cost.transpose() } else { cost.clone() };
    let mut best = f64::INFINITY;
    let mut used = vec![false; m.ncols()];
    fn go(m: &DMatrix<f64>, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == m.nrows() {
            *best = best.min(acc);
            return;
        }
        for col in 0..m.ncols() {
            if !used[col] {
                used[col] = true;
                go(m, row + 1, used, acc + m[(row, col)], best);
                used[col] = false;
            }
        }
    }
    go(&m, 0, &mut used, 0.0, &mut best);
    best
}

/// Every optimal assignment as sorted `(row, col)` lists. Totals within
/// 1e-12 of the best count as optimal.
pub fn brute_assignment(cost: &DMatrix<f64>) -> Vec<Vec<(usize, usize)>> {
    let (r, c) = cost.shape();
    let k = r.min(c);
    let mut all: Vec<(f64, Vec<(usize, usize)>)> = Vec::new();
    fn go(cost: &DMatrix<f64>, k: usize, start: usize, cols_used: &mut [bool], current: &mut Vec<(usize, usize)>, all: &mut Vec<(f64, Vec<(usize, usize)>)>) {
        if current.len() == k {
            let total = current.iter().map(|&(i, j)| cost[(i, j)]).sum();
            all.push((total, current.clone()));
            return;
        }
        for i in start..cost.nrows() {
            for j in 0..cost.ncols() {
                if !cols_used[j] {
                    cols_used[j] = true;
                    current.push((i, j));
                    go(cost, k, i + 1, cols_used, current, all);
                    current.pop();
                    cols_used[j] = false;
                }
            }
        }
    }
    if k == 0 {
        return vec![Vec::new()];
    }
    go(cost, k, 0, &mut vec![false; c], &mut Vec::new(), &mut all);
    let best = all.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
    all.into_iter().filter(|a| a.0 <= best + 1e-12).map(|a| a.1).collect()
}

// ---------------------------------------------------------------------------
// Tracking scores by exhaustive matching and direct set counting.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BruteScores {
    pub det_a: f64,
    pub ass_a: f64,
    pub loc_a: f64,
    pub hota: f64,
}

fn sim(a: &[Option<Vector3<f64>>; 12], b: &[Option<Vector3<f64>>; 12]) -> f64 {
    let d: Vec<f64> = (0..12)
        .filter_map(|k| match (a[k], b[k]) {
            (Some(p), Some(q)) => Some((p - q).norm()),
            _ => None,
        })
        .collect();
    if d.is_empty() {
        return 0.0;
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    if mean >= 1.0 {
        0.0
    } else {
        1.0 - mean
    }
}

// Best total-similarity matching of size min(|pr|, |gt|) by enumeration.
fn best_pairs(s: &[Vec<f64>], n_pr: usize, n_gt: usize) -> Vec<(usize, usize)> {
    let mut best = (-1.0, Vec::new());
    let mut cur = Vec::new();
    fn go(s: &[Vec<f64>], i: usize, n_gt: usize, taken: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, need: usize, best: &mut (f64, Vec<(usize, usize)>)) {
        if cur.len() == need {
            let total: f64 = cur.iter().map(|&(p, g)| s[p][g]).sum();
            if total > best.0 {
                *best = (total, cur.clone());
            }
            return;
        }
        if i == s.len() {
            return;
        }
        // Leave prediction `i` unmatched only if enough remain.
        if s.len() - i > need - cur.len() {
            go(s, i + 1, n_gt, taken, cur, need, best);
        }
        for g in 0..n_gt {
            if !taken[g] {
                taken[g] = true;
                cur.push((i, g));
                go(s, i + 1, n_gt, taken, cur, need, best);
                cur.pop();
                taken[g] = false;
            }
        }
    }
    let need = n_pr.min(n_gt);
    if need == 0 {
        return Vec::new();
    }
    go(s, 0, n_gt, &mut vec![false; n_gt], &mut cur, need, &mut best);
    best.1
}

/// `pred[i]` is scored against `gt[i]`; both sequences share timestamps.
pub fn brute_scores(pred: &[LabeledFrame], gt: &[LabeledFrame], alphas: &[f64]) -> BruteScores {
    assert_eq!(pred.len(), gt.len());
    // (frame, pr id, gt id, S) for every matched pair, before thresholding.
    let mut matched = Vec::new();
    let mut gt_dets = Vec::new();
    let mut pr_dets = Vec::new();
    for (f, (p, g)) in pred.iter().zip(gt).enumerate() {
        let gts: Vec<_> = g.skeletons.iter().filter(|s| s.keypoints.iter().any(Option::is_some)).collect();
        let s: Vec<Vec<f64>> = p.skeletons.iter().map(|a| gts.iter().map(|b| sim(&a.keypoints, &b.keypoints)).collect()).collect();
        for (i, j) in best_pairs(&s, p.skeletons.len(), gts.len()) {
            matched.push((f, p.skeletons[i].id, gts[j].id, s[i][j]));
        }
        gt_dets.extend(gts.iter().map(|s| (f, s.id)));
        pr_dets.extend(p.skeletons.iter().map(|s| (f, s.id)));
    }

    let mut sums = [0.0; 4];
    for &alpha in alphas {
        let tps: Vec<_> = matched.iter().copied().filter(|m| m.3 > alpha).collect();
        let is_tp = |f: usize, p: Option<u64>, g: Option<u64>| {
            tps.iter().any(|t| t.0 == f && p.is_none_or(|p| t.1 == p) && g.is_none_or(|g| t.2 == g))
        };
        let fn_ = gt_dets.iter().filter(|&&(f, g)| !is_tp(f, None, Some(g))).count();
        let fp = pr_dets.iter().filter(|&&(f, p)| !is_tp(f, Some(p), None)).count();
        let tp = tps.len();
        let det = if tp + fn_ + fp == 0 { 0.0 } else { tp as f64 / (tp + fn_ + fp) as f64 };
        let (mut ass, mut loc) = (0.0, 0.0);
        for c in &tps {
            let tpa = tps.iter().filter(|t| t.1 == c.1 && t.2 == c.2).count();
            let fna = gt_dets.iter().filter(|&&(f, g)| g == c.2 && !is_tp(f, Some(c.1), Some(g))).count();
            let fpa = pr_dets.iter().filter(|&&(f, p)| p == c.1 && !is_tp(f, Some(p), Some(c.2))).count();
            ass += tpa as f64 / (tpa + fna + fpa) as f64;
            loc += c.3;
        }
        if tp > 0 {
            ass /= tp as f64;
            loc /= tp as f64;
        }
        sums[0] += det;
        sums[1] += ass;
        sums[2] += loc;
        sums[3] += (det * ass).sqrt();
    }
    let n = alphas.len() as f64;
    BruteScores {
        det_a: sums[0] / n,
        ass_a: sums[1] / n,
        loc_a: sums[2] / n,
        hota: sums[3] / n,
    }
}

// ---------------------------------------------------------------------------
// One constant-acceleration Kalman filter written out in scalars.

#[derive(Debug, Clone)]
pub struct ScalarKf {
    pub x: [f64; 3],
    pub p: [[f64; 3]; 3],
    pub q: [f64; 3],
    pub r: f64,
    pub wrap: bool,
}

impl ScalarKf {
    pub fn new(z: f64, p0: [f64; 3], q: [f64; 3], r: f64, wrap: bool) -> Self {
        let mut p = [[0.0; 3]; 3];
        for i in 0..3 {
            p[i][i] = p0[i];
        }
        ScalarKf {
            x: [z, 0.0, 0.0],
            p,
            q,
            r,
            wrap,
        }
    }

    pub fn predict(&mut self, dt: f64) {
        let f = [[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, 1.0]];
        let mut x = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                x[i] += f[i][j] * self.x[j];
            }
        }
        let mut fp = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    fp[i][j] += f[i][k] * self.p[k][j];
                }
            }
        }
        let mut p = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    p[i][j] += fp[i][k] * f[j][k];
                }
            }
            p[i][i] += self.q[i];
        }
        self.x = x;
        self.p = p;
    }

    pub fn correct(&mut self, z: f64) {
        let mut innov = z - self.x[0];
        if self.wrap {
            let tau = std::f64::consts::TAU;
            innov -= tau * (innov / tau).round();
        }
        let s = self.p[0][0] + self.r;
        let k = [self.p[0][0] / s, self.p[1][0] / s, self.p[2][0] / s];
        let row0 = self.p[0];
        for i in 0..3 {
            self.x[i] += k[i] * innov;
            for j in 0..3 {
                self.p[i][j] -= k[i] * row0[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Planar two-link arm: links along +x, both joints about +y, so a joint
// angle θ turns the link direction to (cos θ, 0, −sin θ).

/// Joint angles reaching `(x, z)` with the second angle in `[0, π]`.
pub fn two_link_ik(l0: f64, l1: f64, x: f64, z: f64) -> Option<(f64, f64)> {
    let h = -z;
    let c2 = (x * x + h * h - l0 * l0 - l1 * l1) / (2.0 * l0 * l1);
    if !(-1.0..=1.0).contains(&c2) {
        return None;
    }
    let t2 = c2.acos();
    let t1 = h.atan2(x) - (l1 * t2.sin()).atan2(l0 + l1 * t2.cos());
    Some((t1, t2))
}

pub fn two_link_fk(l0: f64, l1: f64, t1: f64, t2: f64) -> Vector3<f64> {
    Vector3::new(t1.cos(), 0.0, -t1.sin()) * l0 + Vector3::new((t1 + t2).cos(), 0.0, -(t1 + t2).sin()) * l1
}

// Counts of ids for quick id-preservation checks.
pub fn id_histogram(frames: &[LabeledFrame]) -> HashMap<u64, usize> {
    let mut h = HashMap::new();
    for f in frames {
        for s in &f.skeletons {
            *h.entry(s.id).or_default() += 1;
        }
    }
    h
}
