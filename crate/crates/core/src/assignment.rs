//! Minimum-cost bipartite assignment (Kuhn-Munkres with potentials).

use nalgebra::DMatrix;

/// Optimal assignment for a rectangular cost matrix.
///
/// Every row is matched when `rows <= cols`, every column otherwise. The
/// returned `(row, col)` pairs are sorted by row. Entries must be finite.
pub fn min_cost_assignment(cost: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let (rows, cols) = cost.shape();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    debug_assert!(cost.iter().all(|c| c.is_finite()), "assignment costs must be finite");
    let mut pairs = if rows <= cols {
        solve_wide(rows, cols, |r, c| cost[(r, c)])
    } else {
        solve_wide(cols, rows, |r, c| cost[(c, r)])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect()
    };
    pairs.sort_unstable();
    pairs
}

/// Total cost of a set of pairs.
pub fn assignment_cost(cost: &DMatrix<f64>, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[(r, c)]).sum()
}

// Shortest augmenting path formulation, O(n^2 m) for n <= m. Indices are
// 1-based internally with 0 as the virtual source column.
fn solve_wide(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect()
}
