//! Extreme eigenpairs of symmetric operators, matrix-free.
//!
//! The dual matrix `S`, the Riemannian Hessian and the in-face Gram operator
//! are all applied as black boxes. Lanczos with full reorthogonalization and
//! best-Ritz restarts extracts their smallest eigenpair; a dense path exists
//! for small dimensions and as a fallback.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A symmetric linear operator on `R^dim`.
pub trait SymOp {
    fn dim(&self) -> usize;
    fn apply(&self, v: &DVector<f64>) -> DVector<f64>;
}

/// Dense matrix viewed as a [`SymOp`].
pub struct DenseOp<'a>(pub &'a DMatrix<f64>);

impl SymOp for DenseOp<'_> {
    fn dim(&self) -> usize {
        self.0.nrows()
    }
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.0 * v
    }
}

#[derive(Clone, Debug)]
pub struct LanczosOptions {
    /// Eigenpair accepted when `|A v - l v| <= tol * max(1, |l|)`.
    pub tol: f64,
    /// Krylov basis size per sweep.
    pub max_basis: usize,
    /// Number of best-Ritz restarts after the first sweep.
    pub restarts: usize,
    /// Seed for the random start vector.
    pub seed: u64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_basis: 100,
            restarts: 6,
            seed: 0x5eed,
        }
    }
}

/// Result of an extreme-eigenpair computation.
#[derive(Clone, Debug)]
pub struct EigPair {
    pub value: f64,
    pub vector: DVector<f64>,
    /// Direct residual `|A v - l v|`.
    pub residual: f64,
    pub converged: bool,
    /// Operator applications consumed.
    pub iterations: usize,
}

/// Smallest eigenpair by Lanczos with a seeded random start.
pub fn smallest_eigenpair(op: &dyn SymOp, opts: &LanczosOptions) -> EigPair {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let start = DVector::from_fn(op.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
    smallest_eigenpair_from(op, start, opts)
}

/// Smallest eigenpair by Lanczos from a caller-supplied start vector.
pub fn smallest_eigenpair_from(
    op: &dyn SymOp,
    start: DVector<f64>,
    opts: &LanczosOptions,
) -> EigPair {
    let n = op.dim();
    assert_eq!(start.len(), n, "start vector has wrong dimension");
    if n == 0 {
        return EigPair {
            value: 0.0,
            vector: start,
            residual: 0.0,
            converged: true,
            iterations: 0,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut v0 = start;
    let mut total_applies = 0usize;
    let mut best: Option<EigPair> = None;
    for _sweep in 0..=opts.restarts {
        let (pair, applies) = lanczos_sweep(op, v0.clone(), opts, &mut rng);
        total_applies += applies;
        let better = match &best {
            None => true,
            Some(b) => pair.value < b.value || (pair.converged && !b.converged),
        };
        if better {
            best = Some(pair);
        }
        let b = best.as_ref().unwrap();
        if b.converged {
            break;
        }
        v0 = b.vector.clone();
    }
    let mut out = best.unwrap();
    out.iterations = total_applies;
    out
}

fn lanczos_sweep(
    op: &dyn SymOp,
    start: DVector<f64>,
    opts: &LanczosOptions,
    rng: &mut ChaCha8Rng,
) -> (EigPair, usize) {
    let n = op.dim();
    let k_max = opts.max_basis.min(n);
    let mut v = start;
    if v.norm() < 1e-300 {
        v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    }
    v /= v.norm();
    let mut basis: Vec<DVector<f64>> = vec![v];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut applies = 0usize;
    let mut exhausted = false;

    for k in 0..k_max {
        let mut w = op.apply(&basis[k]);
        applies += 1;
        let alpha = basis[k].dot(&w);
        w.axpy(-alpha, &basis[k], 1.0);
        if k > 0 {
            let beta_prev = betas[k - 1];
            w.axpy(-beta_prev, &basis[k - 1], 1.0);
        }
        // full reorthogonalization, two passes
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        alphas.push(alpha);
        let beta = w.norm();
        let t_scale = alphas.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let invariant = beta <= 1e-14 * t_scale.max(1.0);
        let check_now = invariant || k == k_max - 1 || k % 4 == 3;
        if check_now {
            let (theta, coeffs) = smallest_ritz(&alphas, &betas);
            let est = beta * coeffs[coeffs.len() - 1].abs();
            if invariant || est <= opts.tol * theta.abs().max(1.0) {
                let mut x = DVector::zeros(n);
                for (c, b) in coeffs.iter().zip(&basis) {
                    x.axpy(*c, b, 1.0);
                }
                let xn = x.norm();
                if xn > 0.0 {
                    x /= xn;
                }
                let ax = op.apply(&x);
                applies += 1;
                let value = x.dot(&ax);
                let residual = (&ax - &x * value).norm();
                let converged = residual <= opts.tol * value.abs().max(1.0) || invariant;
                if converged || invariant {
                    return (
                        EigPair {
                            value,
                            vector: x,
                            residual,
                            converged,
                            iterations: applies,
                        },
                        applies,
                    );
                }
            }
        }
        if invariant {
            exhausted = true;
            break;
        }
        if k < k_max - 1 {
            betas.push(beta);
            basis.push(w / beta);
        }
    }

    // basis exhausted without convergence: report the best Ritz pair
    let (theta, coeffs) = smallest_ritz(&alphas, &betas);
    let mut x = DVector::zeros(n);
    for (c, b) in coeffs.iter().zip(&basis) {
        x.axpy(*c, b, 1.0);
    }
    let xn = x.norm();
    if xn > 0.0 {
        x /= xn;
    }
    let ax = op.apply(&x);
    applies += 1;
    let value = x.dot(&ax);
    let residual = (&ax - &x * value).norm();
    let converged = residual <= opts.tol * theta.abs().max(1.0) || exhausted;
    (
        EigPair {
            value,
            vector: x,
            residual,
            converged,
            iterations: applies,
        },
        applies,
    )
}

/// Smallest Ritz pair of the Lanczos tridiagonal matrix.
fn smallest_ritz(alphas: &[f64], betas: &[f64]) -> (f64, Vec<f64>) {
    let k = alphas.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alphas[i];
        if i + 1 < k {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = t.symmetric_eigen();
    let mut idx = 0;
    for (i, l) in eig.eigenvalues.iter().enumerate() {
        if *l < eig.eigenvalues[idx] {
            idx = i;
        }
    }
    (
        eig.eigenvalues[idx],
        eig.eigenvectors.column(idx).iter().cloned().collect(),
    )
}

/// Materializes an operator column by column. Fallback and test oracle.
pub fn materialize(op: &dyn SymOp) -> DMatrix<f64> {
    let n = op.dim();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        out.set_column(j, &op.apply(&e));
    }
    // symmetrize away the asymmetry of roundoff
    (&out + out.transpose()) * 0.5
}

/// Smallest eigenpair of a dense symmetric matrix.
pub fn dense_smallest_eigenpair(mat: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = mat.clone().symmetric_eigen();
    let mut idx = 0;
    for (i, l) in eig.eigenvalues.iter().enumerate() {
        if *l < eig.eigenvalues[idx] {
            idx = i;
        }
    }
    (eig.eigenvalues[idx], eig.eigenvectors.column(idx).into_owned())
}

/// Full symmetric eigendecomposition sorted ascending.
pub fn sorted_symmetric_eigen(mat: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = mat.clone().symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}
