//! Exact linear assignment (Hungarian algorithm with potentials).
//!
//! Used to round near-orthogonal blocks to permutation matrices. The solver
//! is `O(k^3)` and deterministic: its fixed scan order breaks ties toward the
//! lowest column index.

use nalgebra::DMatrix;

/// Minimum-cost perfect assignment of a square cost matrix.
/// Returns `row_to_col`.
pub fn min_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let k = cost.nrows();
    assert_eq!(k, cost.ncols(), "assignment requires a square matrix");
    if k == 0 {
        return Vec::new();
    }
    // potentials-based O(k^3) Hungarian; rows/cols are 1-based internally
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; k + 1];
    let mut v = vec![0.0f64; k + 1];
    let mut p = vec![0usize; k + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=k {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=k {
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
    let mut row_to_col = vec![0usize; k];
    for j in 1..=k {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Maximum-score assignment: permutation `P` maximizing `<P, score>`.
pub fn max_assignment(score: &DMatrix<f64>) -> Vec<usize> {
    min_assignment(&(-score))
}

/// The permutation matrix maximizing `<P, score>`.
pub fn assignment_matrix(score: &DMatrix<f64>) -> DMatrix<f64> {
    let cols = max_assignment(score);
    let k = score.nrows();
    let mut p = DMatrix::zeros(k, k);
    for (r, &c) in cols.iter().enumerate() {
        p[(r, c)] = 1.0;
    }
    p
}
