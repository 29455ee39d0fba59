//! Dense strictly convex QP with equality and box constraints.
//!
//! ```text
//! minimize   ½ xᵀHx + gᵀx
//! subject to A x = b,  lb ≤ x ≤ ub
//! ```
//!
//! Primal active-set method on the variable bounds. Equalities are kept in
//! the working set at all times; a feasible start is obtained by adding
//! elastic variables `A x + r⁺ - r⁻ = b`, `r± ≥ 0`, penalised with an exact
//! L1 term that is raised until the elastics leave the solution.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("Hessian is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("bounds inverted at variable {index}: {lower} > {upper}")]
    InvertedBounds { index: usize, lower: f64, upper: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    eq_matrix: DMatrix<f64>,
    eq_rhs: DVector<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        eq_matrix: DMatrix<f64>,
        eq_rhs: DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = linear.len();
        if hessian.shape() != (n, n) {
            return Err(QpError::DimensionMismatch(format!(
                "H is {:?}, g has {n} entries",
                hessian.shape()
            )));
        }
        if eq_matrix.ncols() != n || eq_matrix.nrows() != eq_rhs.len() {
            return Err(QpError::DimensionMismatch(format!(
                "A_eq is {:?}, b_eq has {} entries, n = {n}",
                eq_matrix.shape(),
                eq_rhs.len()
            )));
        }
        if lower.len() != n || upper.len() != n {
            return Err(QpError::DimensionMismatch("bounds length differs from n".into()));
        }
        if !hessian.iter().all(|v| v.is_finite()) {
            return Err(QpError::NonFinite("H"));
        }
        if !linear.iter().all(|v| v.is_finite()) {
            return Err(QpError::NonFinite("g"));
        }
        if !eq_matrix.iter().chain(eq_rhs.iter()).all(|v| v.is_finite()) {
            return Err(QpError::NonFinite("equality constraints"));
        }
        if lower.iter().chain(upper.iter()).any(|v| v.is_nan()) {
            return Err(QpError::NonFinite("bounds"));
        }
        for i in 0..n {
            if lower[i] > upper[i] {
                return Err(QpError::InvertedBounds {
                    index: i,
                    lower: lower[i],
                    upper: upper[i],
                });
            }
        }
        let scale = hessian.amax().max(1.0);
        let asym = (&hessian - hessian.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(QpError::NotSymmetric(asym));
        }
        let chol = hessian.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
        let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b));
        if !(min_pivot * min_pivot > 1e-14 * scale) {
            return Err(QpError::NotPositiveDefinite);
        }
        Ok(QpProblem {
            hessian,
            linear,
            eq_matrix,
            eq_rhs,
            lower,
            upper,
        })
    }

    /// Box-constrained problem without equalities.
    pub fn with_bounds(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = linear.len();
        Self::new(hessian, linear, DMatrix::zeros(0, n), DVector::zeros(0), lower, upper)
    }

    pub fn unconstrained(hessian: DMatrix<f64>, linear: DVector<f64>) -> Result<Self, QpError> {
        let n = linear.len();
        Self::with_bounds(
            hessian,
            linear,
            DVector::from_element(n, f64::NEG_INFINITY),
            DVector::from_element(n, f64::INFINITY),
        )
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn eq_count(&self) -> usize {
        self.eq_rhs.len()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.linear
    }

    pub fn eq_matrix(&self) -> &DMatrix<f64> {
        &self.eq_matrix
    }

    pub fn eq_rhs(&self) -> &DVector<f64> {
        &self.eq_rhs
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    pub fn eq_residual(&self, x: &DVector<f64>) -> f64 {
        if self.eq_count() == 0 {
            0.0
        } else {
            (&self.eq_matrix * x - &self.eq_rhs).amax()
        }
    }

    /// Plain-text dump for offline inspection: one header line per block
    /// (`name rows cols`) followed by whitespace-separated rows.
    pub fn write_text(&self, mut w: impl Write) -> io::Result<()> {
        fn block(w: &mut impl Write, name: &str, m: &DMatrix<f64>) -> io::Result<()> {
            writeln!(w, "{name} {} {}", m.nrows(), m.ncols())?;
            for r in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:e}", m[(r, c)])).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
            Ok(())
        }
        let col = |v: &DVector<f64>| DMatrix::from_column_slice(1, v.len(), v.as_slice());
        block(&mut w, "H", &self.hessian)?;
        block(&mut w, "g", &col(&self.linear))?;
        block(&mut w, "A_eq", &self.eq_matrix)?;
        block(&mut w, "b_eq", &col(&self.eq_rhs))?;
        block(&mut w, "lb", &col(&self.lower))?;
        block(&mut w, "ub", &col(&self.upper))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Starting point hint; projected onto the box.
    pub initial: Option<DVector<f64>>,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            tol: 1e-8,
            max_iter: 200,
            initial: None,
        }
    }
}

/// One entry of the iteration trace: the (penalised) objective after an
/// active-set iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub objective: f64,
    pub working_bounds: usize,
}

pub fn solve(problem: &QpProblem, tol: f64, max_iter: usize) -> QpSolution {
    solve_with(
        problem,
        &QpSettings {
            tol,
            max_iter,
            initial: None,
        },
        |_| {},
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

pub fn solve_with(problem: &QpProblem, settings: &QpSettings, mut trace: impl FnMut(&TraceEntry)) -> QpSolution {
    let n = problem.dim();
    let m = problem.eq_count();
    let tol = settings.tol;

    let mut x0 = settings
        .initial
        .clone()
        .filter(|v| v.len() == n)
        .unwrap_or_else(|| DVector::zeros(n));
    for i in 0..n {
        x0[i] = x0[i].clamp(problem.lower[i], problem.upper[i]);
        if !x0[i].is_finite() {
            x0[i] = 0.0;
        }
    }

    let scale = 1.0 + problem.linear.amax() + problem.hessian.amax() * (1.0 + x0.amax() + problem.eq_rhs.amax());

    // Extended problem with 2m elastic columns.
    let big_n = n + 2 * m;
    let mut h = DMatrix::zeros(big_n, big_n);
    h.view_mut((0, 0), (n, n)).copy_from(&problem.hessian);
    let elastic_curv = (problem.hessian.diagonal().sum() / n.max(1) as f64).max(1e-8);
    for k in n..big_n {
        h[(k, k)] = elastic_curv;
    }
    let mut penalty = 1e2 * scale;
    let mut g = DVector::zeros(big_n);
    g.rows_mut(0, n).copy_from(&problem.linear);
    g.rows_mut(n, 2 * m).fill(penalty);
    let mut e = DMatrix::zeros(m, big_n);
    if m > 0 {
        e.view_mut((0, 0), (m, n)).copy_from(&problem.eq_matrix);
        for i in 0..m {
            e[(i, n + i)] = 1.0;
            e[(i, n + m + i)] = -1.0;
        }
    }
    let mut lo = DVector::zeros(big_n);
    let mut hi = DVector::from_element(big_n, f64::INFINITY);
    lo.rows_mut(0, n).copy_from(&problem.lower);
    hi.rows_mut(0, n).copy_from(&problem.upper);

    let mut z = DVector::zeros(big_n);
    z.rows_mut(0, n).copy_from(&x0);
    if m > 0 {
        let resid = &problem.eq_rhs - &problem.eq_matrix * &x0;
        for i in 0..m {
            z[n + i] = resid[i].max(0.0);
            z[n + m + i] = (-resid[i]).max(0.0);
        }
    }

    // Variables sitting exactly on a bound start in the working set; a
    // finite variable with lo == hi is always fixed.
    let mut state: Vec<Bound> = (0..big_n)
        .map(|j| {
            if z[j] == lo[j] {
                Bound::Lower
            } else if z[j] == hi[j] {
                Bound::Upper
            } else {
                Bound::Free
            }
        })
        .collect();
    // Keep the working set independent: each equality row must retain a free column.
    if m > 0 {
        for i in 0..m {
            let has_free = (0..big_n).any(|j| e[(i, j)] != 0.0 && state[j] == Bound::Free);
            if !has_free {
                state[n + i] = Bound::Free;
            }
        }
    }

    let step_tol = 1e-13 * (1.0 + x0.amax());
    let dual_tol = 1e-11 * scale;
    let max_penalty = 1e12 * scale;

    let objective_of = |z: &DVector<f64>, g: &DVector<f64>| 0.5 * z.dot(&(&h * z)) + g.dot(z);

    let mut status = QpStatus::MaxIterations;
    let mut iterations = 0;
    while iterations < settings.max_iter {
        iterations += 1;
        let free: Vec<usize> = (0..big_n).filter(|&j| state[j] == Bound::Free).collect();
        let grad = &h * &z + &g;

        let (p_free, lambda) = match eqp_step(&h, &e, &grad, &free) {
            Some(v) => v,
            None => break,
        };

        let p_norm = p_free.amax();
        if p_norm <= step_tol {
            // Stationary on the working set: inspect bound multipliers.
            let mut r = grad.clone();
            if m > 0 {
                r += e.transpose() * &lambda;
            }
            let mut worst: Option<(usize, f64)> = None;
            for j in 0..big_n {
                let mu = match state[j] {
                    Bound::Free => continue,
                    _ if lo[j] == hi[j] => continue,
                    Bound::Lower => r[j],
                    Bound::Upper => -r[j],
                };
                if mu < -dual_tol && worst.is_none_or(|(_, w)| mu < w) {
                    worst = Some((j, mu));
                }
            }
            match worst {
                Some((j, _)) => {
                    state[j] = Bound::Free;
                }
                None => {
                    let elastic_max = if m > 0 { z.rows(n, 2 * m).amax() } else { 0.0 };
                    if elastic_max <= tol * 1e-3 {
                        status = QpStatus::Optimal;
                        break;
                    }
                    if penalty >= max_penalty {
                        status = QpStatus::Infeasible;
                        break;
                    }
                    penalty *= 100.0;
                    g.rows_mut(n, 2 * m).fill(penalty);
                }
            }
        } else {
            let mut alpha = 1.0f64;
            let mut blocking: Option<(usize, Bound)> = None;
            for (k, &j) in free.iter().enumerate() {
                let pj = p_free[k];
                if pj > 0.0 && hi[j].is_finite() {
                    let a = ((hi[j] - z[j]) / pj).max(0.0);
                    if a < alpha {
                        alpha = a;
                        blocking = Some((j, Bound::Upper));
                    }
                } else if pj < 0.0 && lo[j].is_finite() {
                    let a = ((lo[j] - z[j]) / pj).max(0.0);
                    if a < alpha {
                        alpha = a;
                        blocking = Some((j, Bound::Lower));
                    }
                }
            }
            for (k, &j) in free.iter().enumerate() {
                z[j] = (z[j] + alpha * p_free[k]).clamp(lo[j], hi[j]);
            }
            if let Some((j, side)) = blocking {
                z[j] = if side == Bound::Lower { lo[j] } else { hi[j] };
                state[j] = side;
            }
        }

        trace(&TraceEntry {
            iteration: iterations,
            objective: objective_of(&z, &g),
            working_bounds: state.iter().filter(|s| **s != Bound::Free).count(),
        });
    }

    let x = DVector::from_iterator(n, (0..n).map(|i| z[i].clamp(problem.lower[i], problem.upper[i])));
    if status == QpStatus::Optimal && problem.eq_residual(&x) >= tol {
        status = QpStatus::Infeasible;
    }
    QpSolution {
        objective: problem.objective(&x),
        x,
        status,
        iterations,
    }
}

// Equality-constrained subproblem on the free variables:
//   [H_ff E_fᵀ] [p]   [-grad_f]
//   [E_f   0  ] [λ] = [   0   ]
fn eqp_step(
    h: &DMatrix<f64>,
    e: &DMatrix<f64>,
    grad: &DVector<f64>,
    free: &[usize],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let nf = free.len();
    let m = e.nrows();
    let h_ff = DMatrix::from_fn(nf, nf, |a, b| h[(free[a], free[b])]);
    let rhs_f = DVector::from_fn(nf, |a, _| -grad[free[a]]);
    if m == 0 {
        if nf == 0 {
            return Some((DVector::zeros(0), DVector::zeros(0)));
        }
        let p = h_ff.cholesky()?.solve(&rhs_f);
        return Some((p, DVector::zeros(0)));
    }
    let k = nf + m;
    let mut kkt = DMatrix::zeros(k, k);
    kkt.view_mut((0, 0), (nf, nf)).copy_from(&h_ff);
    for i in 0..m {
        for (a, &j) in free.iter().enumerate() {
            kkt[(nf + i, a)] = e[(i, j)];
            kkt[(a, nf + i)] = e[(i, j)];
        }
    }
    let mut rhs = DVector::zeros(k);
    rhs.rows_mut(0, nf).copy_from(&rhs_f);
    let sol = kkt.lu().solve(&rhs)?;
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, nf).into_owned(), sol.rows(nf, m).into_owned()))
}
