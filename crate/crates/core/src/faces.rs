//! Convex facial geometry of the spectrahedron `{X >= 0, X_ii = I_d}`.
//!
//! For full-rank `Y` with `X = Y Y^T`, the face containing `X` in its relative
//! interior is `{Y (I_p + A) Y^T : A in ker L_X, I_p + A >= 0}` with
//! `L_X(A) = (Y_1 A Y_1^T, ..., Y_m A Y_m^T)`. Its dimension is the kernel
//! dimension of `L_X`, computed here through the positive semidefinite Gram
//! operator `H(A) = Y^T symblockdiag(Y A Y^T) Y = L_X^* L_X (A)`. Extreme
//! points (`dim F_X = 0`) have rank at most
//! `p* = (sqrt(1 + 4 m d (d+1)) - 1)/2`.

use nalgebra::{DMatrix, DVector};

use crate::blockmat::{BlockDiag, BlockSpec};
use crate::eigs::{smallest_eigenpair, sorted_symmetric_eigen, LanczosOptions, SymOp};
use crate::error::{Error, Result};
use crate::stiefel::{
    polar_factor, random_point, rank_deficiency, ManifoldSpec, StiefelPoint,
    DEFAULT_COND_THRESHOLD,
};

/// Kernel threshold: eigenvalues of `H` at or below `tol * lambda_max` count
/// toward the face dimension.
pub const DEFAULT_KERNEL_TOL: f64 = 1e-10;

/// Largest `p` for which `H` is materialized densely on the
/// `p(p+1)/2`-dimensional symmetric space.
pub const DENSE_FACE_LIMIT: usize = 80;

/// The Barvinok-Pataki rank bound `p* = (sqrt(1 + 4 m d (d+1)) - 1)/2`;
/// extreme points of the spectrahedron have rank at most `p*`.
pub fn p_star(spec: BlockSpec) -> f64 {
    let md = (spec.m() * spec.d() * (spec.d() + 1)) as f64;
    ((1.0 + 4.0 * md).sqrt() - 1.0) / 2.0
}

/// Facial diagnostics at `X = Y Y^T` for full-rank `Y`.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct FaceReport {
    pub p: usize,
    /// `Delta = p(p+1)/2 - m d(d+1)/2`, the generic face dimension bound.
    pub delta: i64,
    /// `dim F_X`: kernel dimension of `L_X`.
    pub dim_face: usize,
    pub p_star: f64,
    /// `p(p+1)/2 - p(d+1)/2`, the attainable upper bound.
    pub upper_bound: f64,
    pub is_extreme: bool,
}

/// `Delta = p(p+1)/2 - m d(d+1)/2`.
pub fn delta(spec: BlockSpec, p: usize) -> i64 {
    (p * (p + 1) / 2) as i64 - (spec.m() * spec.d() * (spec.d() + 1) / 2) as i64
}

// --- coordinates on the symmetric p x p matrices -------------------------

fn sym_dim(p: usize) -> usize {
    p * (p + 1) / 2
}

fn sym_index_pairs(p: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(sym_dim(p));
    for a in 0..p {
        for b in a..p {
            pairs.push((a, b));
        }
    }
    pairs
}

/// Orthonormal coordinates: diagonal entries as-is, off-diagonals scaled by
/// `sqrt(2)`, so `<A, B>_F` equals the coordinate dot product.
fn coords_to_sym(v: &DVector<f64>, p: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(p, p);
    let s = std::f64::consts::SQRT_2.recip();
    for (k, (i, j)) in sym_index_pairs(p).into_iter().enumerate() {
        if i == j {
            a[(i, i)] = v[k];
        } else {
            a[(i, j)] = v[k] * s;
            a[(j, i)] = v[k] * s;
        }
    }
    a
}

fn sym_to_coords(a: &DMatrix<f64>) -> DVector<f64> {
    let p = a.nrows();
    let s = std::f64::consts::SQRT_2;
    let pairs = sym_index_pairs(p);
    DVector::from_fn(pairs.len(), |k, _| {
        let (i, j) = pairs[k];
        if i == j {
            a[(i, i)]
        } else {
            a[(i, j)] * s
        }
    })
}

/// The Gram operator `H(A) = Y^T symblockdiag(Y A Y^T) Y` in symmetric
/// coordinates. One application costs `O(m (d^2 p + p^2 d))` flops.
struct FaceGramOp<'a> {
    y: &'a StiefelPoint,
}

impl FaceGramOp<'_> {
    fn apply_sym(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.y.matrix();
        let b = y * a; // m slices, O(d p^2) each
        let lambda = BlockDiag::sym_product(self.y.spec(), &b, y)
            .expect("shapes fixed by construction"); // O(d^2 p) per slice
        let ly = lambda.apply(y).expect("shapes fixed by construction"); // O(d^2 p)
        y.transpose() * ly // O(d p^2) per slice
    }
}

impl SymOp for FaceGramOp<'_> {
    fn dim(&self) -> usize {
        sym_dim(self.y.p())
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let a = coords_to_sym(v, self.y.p());
        sym_to_coords(&self.apply_sym(&a))
    }
}

/// Flop count of one `H` application as implemented; tests pin it to the
/// `O(m (d^2 p + p^2 d))` formula.
pub fn face_gram_apply_flops(spec: BlockSpec, p: usize) -> usize {
    let (m, d) = (spec.m(), spec.d());
    // y * a  +  sym_product  +  lambda * y  +  y^T * (lambda y)
    m * (2 * d * p * p + 2 * d * d * p + 2 * d * d * p + 2 * d * p * p)
}

fn require_full_rank(y: &StiefelPoint) -> Result<()> {
    let r = rank_deficiency(y, DEFAULT_COND_THRESHOLD);
    if r.deficient {
        return Err(Error::InvalidArgument(format!(
            "face computations require full-rank Y (numerical rank {} < p = {})",
            r.numerical_rank,
            y.p()
        )));
    }
    Ok(())
}

/// Spectrum of `H` in coordinates, dense path (`p <= DENSE_FACE_LIMIT`).
fn dense_gram_matrix(y: &StiefelPoint) -> DMatrix<f64> {
    let op = FaceGramOp { y };
    let q = sym_dim(y.p());
    let mut h = DMatrix::zeros(q, q);
    for k in 0..q {
        let mut e = DVector::zeros(q);
        e[k] = 1.0;
        h.set_column(k, &op.apply(&e));
    }
    (&h + h.transpose()) * 0.5
}

/// Computes `dim F_X` and the surrounding diagnostics. Requires full-rank `Y`.
pub fn face_dimension(y: &StiefelPoint, tol: f64) -> Result<FaceReport> {
    require_full_rank(y)?;
    let p = y.p();
    let spec = y.spec();
    let dim_face = if p <= DENSE_FACE_LIMIT {
        let h = dense_gram_matrix(y);
        let (vals, _) = sorted_symmetric_eigen(&h);
        let lambda_max = vals[vals.len() - 1].max(0.0);
        if vals[0] < -1e-10 * lambda_max.max(1.0) {
            return Err(Error::Numerical(format!(
                "face Gram operator has negative eigenvalue {:.3e}",
                vals[0]
            )));
        }
        vals.iter().filter(|&&l| l <= tol * lambda_max).count()
    } else {
        kernel_dimension_matrix_free(y, tol)?
    };
    Ok(FaceReport {
        p,
        delta: delta(spec, p),
        dim_face,
        p_star: p_star(spec),
        upper_bound: (p * (p + 1)) as f64 / 2.0 - (p * (spec.d() + 1)) as f64 / 2.0,
        is_extreme: dim_face == 0,
    })
}

/// Deflated Lanczos count of the near-kernel of `H`, for large `p`.
fn kernel_dimension_matrix_free(y: &StiefelPoint, tol: f64) -> Result<usize> {
    struct Deflated<'a> {
        inner: FaceGramOp<'a>,
        shift: f64,
        vecs: Vec<DVector<f64>>,
    }
    impl SymOp for Deflated<'_> {
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
            let mut out = self.inner.apply(v);
            for w in &self.vecs {
                out += w * (self.shift * w.dot(v));
            }
            out
        }
    }
    let base = FaceGramOp { y };
    // crude largest-eigenvalue estimate through the negated operator
    struct Neg<'a>(&'a FaceGramOp<'a>);
    impl SymOp for Neg<'_> {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
            -self.0.apply(v)
        }
    }
    let lopts = LanczosOptions {
        tol: 1e-8,
        ..Default::default()
    };
    let lambda_max = -smallest_eigenpair(&Neg(&base), &lopts).value;
    let cutoff = tol * lambda_max.max(1e-300);
    let mut op = Deflated {
        inner: FaceGramOp { y },
        shift: 4.0 * lambda_max.max(1.0),
        vecs: Vec::new(),
    };
    let cap = 512.min(sym_dim(y.p()));
    for k in 0..=cap {
        let pair = smallest_eigenpair(&op, &LanczosOptions {
            tol: 1e-9,
            seed: 0x5eed ^ k as u64,
            ..Default::default()
        });
        if !pair.converged {
            return Err(Error::EigNonConvergence(
                "face kernel deflation stalled".into(),
            ));
        }
        if pair.value > cutoff {
            return Ok(k);
        }
        op.vecs.push(pair.vector);
    }
    Ok(cap)
}

/// Outcome of an in-face rank-reduction attempt.
#[derive(Clone, Debug)]
pub enum RankReduction {
    /// `Y'` with `Y' Y'^T = Y (I_p - A / lambda_min(A)) Y^T` of rank `<= p-1`.
    Reduced(StiefelPoint),
    /// `H` is definite: `X` is extreme, no in-face move exists.
    NoKernel,
}

/// Moves `X = Y Y^T` to the boundary of its face along a kernel direction of
/// `H`, dropping the rank by at least one. Requires full-rank `Y`.
pub fn in_face_rank_reduction(y: &StiefelPoint, tol: f64) -> Result<RankReduction> {
    require_full_rank(y)?;
    let p = y.p();
    let (kernel_coords, lambda_max) = if p <= DENSE_FACE_LIMIT {
        let h = dense_gram_matrix(y);
        let (vals, vecs) = sorted_symmetric_eigen(&h);
        let lambda_max = vals[vals.len() - 1].max(0.0);
        if vals[0] > tol * lambda_max {
            return Ok(RankReduction::NoKernel);
        }
        (vecs.column(0).into_owned(), lambda_max)
    } else {
        let op = FaceGramOp { y };
        struct Neg<'a>(&'a FaceGramOp<'a>);
        impl SymOp for Neg<'_> {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
                -self.0.apply(v)
            }
        }
        let lambda_max = -smallest_eigenpair(&Neg(&op), &LanczosOptions::default()).value;
        let pair = smallest_eigenpair(&op, &LanczosOptions::default());
        if pair.value > tol * lambda_max.max(0.0) {
            return Ok(RankReduction::NoKernel);
        }
        (pair.vector, lambda_max.max(0.0))
    };
    let _ = lambda_max;
    let a = coords_to_sym(&kernel_coords, p);
    // trace(A G) = 0 with G > 0 forces lambda_min(A) < 0 for nonzero A
    let (avals, avecs) = sorted_symmetric_eigen(&a);
    let lambda_min_a = avals[0];
    if lambda_min_a >= -1e-12 {
        return Err(Error::Numerical(
            "kernel direction of the face Gram operator is not indefinite".into(),
        ));
    }
    // M = I - A / lambda_min(A): positive semidefinite with nontrivial kernel
    let mvals: Vec<f64> = avals.iter().map(|l| 1.0 - l / lambda_min_a).collect();
    let m_max = mvals.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..p).filter(|&k| mvals[k] > 1e-12 * m_max).collect();
    let p_new = keep.len();
    let d = y.spec().d();
    if p_new >= p || p_new < d {
        return Err(Error::Numerical(format!(
            "rank reduction produced invalid target rank {p_new}"
        )));
    }
    let mut w = DMatrix::zeros(p, p_new);
    for (c, &k) in keep.iter().enumerate() {
        let col = avecs.column(k) * mvals[k].sqrt();
        w.set_column(c, &col);
    }
    let y_small = y.matrix() * &w;
    // re-normalize each slice; the kernel direction is only numerically exact
    let mut out = DMatrix::zeros(y.spec().n(), p_new);
    for i in 0..y.spec().m() {
        let slice = y_small.view((i * d, 0), (d, p_new)).into_owned();
        let slice = polar_factor(slice, i)?;
        out.view_mut((i * d, 0), (d, p_new)).copy_from(&slice);
    }
    let manifold = ManifoldSpec::new(y.spec(), p_new)?;
    Ok(RankReduction::Reduced(StiefelPoint::from_matrix(
        manifold, out,
    )?))
}

/// `floor((dim F_X - Delta) / p)`, clamped at zero: the number of negative
/// eigenvalues `S` may have at a full-rank second-order critical point of a
/// concave cost.
pub fn negative_eigenvalue_budget(report: &FaceReport) -> usize {
    let num = report.dim_face as i64 - report.delta;
    if num <= 0 {
        0
    } else {
        (num / report.p as i64) as usize
    }
}

/// Samples `trials` random points of `St(1,p)^m` and returns the fraction
/// whose face dimension equals `max(0, Delta)`. Generic faces have minimal
/// dimension almost surely (proved for `d = 1`).
pub fn generic_face_dimension_trial(
    m: usize,
    p: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let spec = BlockSpec::new(m, 1)?;
    let manifold = ManifoldSpec::new(spec, p)?;
    let expected = delta(spec, p).max(0) as usize;
    let mut hits = 0usize;
    for t in 0..trials {
        let y = random_point(manifold, seed.wrapping_add(t as u64));
        let report = face_dimension(&y, DEFAULT_KERNEL_TOL)?;
        if report.dim_face == expected {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn manifold(m: usize, d: usize, p: usize) -> ManifoldSpec {
        ManifoldSpec::new(BlockSpec::new(m, d).unwrap(), p).unwrap()
    }

    /// d=1, m=3, p=2, rows e1, e2, e1: the upper-bound-attaining face.
    fn repeated_rows_point() -> StiefelPoint {
        StiefelPoint::from_matrix(
            manifold(3, 1, 2),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn p_star_satisfies_the_sandwich() {
        for (m, d) in [(3usize, 1usize), (5, 2), (10, 3), (100, 6)] {
            let spec = BlockSpec::new(m, d).unwrap();
            let ps = p_star(spec);
            assert!(ps < (d as f64 + 1.0) * (m as f64).sqrt());
            // p* solves p(p+1) = m d (d+1)
            assert_relative_eq!(
                ps * (ps + 1.0),
                (m * d * (d + 1)) as f64,
                epsilon = 1e-9
            );
        }
        // m = 3, d = 1: p(p+1) = 6 gives p* = 2 exactly
        assert_relative_eq!(p_star(BlockSpec::new(3, 1).unwrap()), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn repeated_rows_attain_the_upper_bound() {
        let y = repeated_rows_point();
        let r = face_dimension(&y, DEFAULT_KERNEL_TOL).unwrap();
        assert_eq!(r.dim_face, 1);
        assert_relative_eq!(r.upper_bound, 1.0, epsilon = 0.0);
        assert_eq!(r.delta, 0);
        assert!(!r.is_extreme);
    }

    #[test]
    fn generic_point_has_minimal_face_dimension() {
        let y = random_point(manifold(3, 1, 2), 7);
        let r = face_dimension(&y, DEFAULT_KERNEL_TOL).unwrap();
        assert_eq!(r.dim_face, 0);
        assert!(r.is_extreme);
    }

    #[test]
    fn square_slices_are_extreme() {
        let y = random_point(manifold(4, 2, 2), 8);
        let r = face_dimension(&y, DEFAULT_KERNEL_TOL).unwrap();
        assert_eq!(r.dim_face, 0);
        assert!(r.is_extreme);
    }

    #[test]
    fn face_dimension_rejects_rank_deficient_points() {
        let y = random_point(manifold(3, 1, 2), 9);
        let y_plus = crate::stiefel::append_zero_columns(&y, 3).unwrap();
        assert!(face_dimension(&y_plus, DEFAULT_KERNEL_TOL).is_err());
    }

    #[test]
    fn gram_operator_is_adjoint_square_of_l() {
        // <H(A), B> = <L(A), L(B)> for random symmetric A, B
        let y = random_point(manifold(4, 2, 3), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let rand_sym = |rng: &mut ChaCha8Rng| {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() - 0.5);
            (&a + a.transpose()) * 0.5
        };
        let l_of = |a: &DMatrix<f64>| -> Vec<DMatrix<f64>> {
            (0..4)
                .map(|i| {
                    let yi = y.slice(i);
                    &yi * a * yi.transpose()
                })
                .collect()
        };
        let op = FaceGramOp { y: &y };
        for _ in 0..10 {
            let a = rand_sym(&mut rng);
            let b = rand_sym(&mut rng);
            let ha_b = op.apply_sym(&a).dot(&b);
            let la = l_of(&a);
            let lb = l_of(&b);
            let ll: f64 = la.iter().zip(&lb).map(|(x, z)| x.dot(z)).sum();
            assert!((ha_b - ll).abs() < 1e-12, "{ha_b} vs {ll}");
        }
    }

    #[test]
    fn gram_operator_is_psd() {
        for seed in 0..5 {
            let y = random_point(manifold(5, 2, 4), 20 + seed);
            let h = dense_gram_matrix(&y);
            let (vals, _) = sorted_symmetric_eigen(&h);
            let lmax = vals[vals.len() - 1];
            assert!(vals[0] >= -1e-12 * lmax, "seed {seed}: {}", vals[0]);
        }
    }

    #[test]
    fn reduction_on_the_repeated_rows_face() {
        let y = repeated_rows_point();
        match in_face_rank_reduction(&y, DEFAULT_KERNEL_TOL).unwrap() {
            RankReduction::Reduced(y2) => {
                assert_eq!(y2.p(), 1);
                // X' = Y (I + A) Y^T is the all-ones matrix
                let x2 = y2.to_x();
                let ones = DMatrix::from_element(3, 3, 1.0);
                assert!((&x2 - &ones).norm() < 1e-10 || (&x2 + &ones).norm() < 1e-10);
                assert!(y2.feasibility_residual() < 1e-10);
            }
            RankReduction::NoKernel => panic!("expected a kernel direction"),
        }
    }

    #[test]
    fn reduction_reports_no_kernel_on_extreme_points() {
        let y = random_point(manifold(3, 1, 2), 30);
        assert!(matches!(
            in_face_rank_reduction(&y, DEFAULT_KERNEL_TOL).unwrap(),
            RankReduction::NoKernel
        ));
    }

    #[test]
    fn budget_formula() {
        let spec = BlockSpec::new(3, 1).unwrap();
        let mk = |dim_face: usize, p: usize| FaceReport {
            p,
            delta: delta(spec, p),
            dim_face,
            p_star: p_star(spec),
            upper_bound: 0.0,
            is_extreme: dim_face == 0,
        };
        // delta(3,1,p=2) = 0
        assert_eq!(negative_eigenvalue_budget(&mk(0, 2)), 0);
        assert_eq!(negative_eigenvalue_budget(&mk(2, 2)), 1);
        assert_eq!(negative_eigenvalue_budget(&mk(1, 2)), 0);
    }

    #[test]
    fn generic_trial_fractions() {
        // m=5, p=2: Delta = 3 - 5 < 0, expected dimension 0
        let f = generic_face_dimension_trial(5, 2, 200, 1).unwrap();
        assert!(f >= 0.99, "fraction {f}");
        // m=3, p=3: Delta = 6 - 3 = 3
        let f2 = generic_face_dimension_trial(3, 3, 200, 2).unwrap();
        assert!(f2 >= 0.99, "fraction {f2}");
        // p = 1: rank-d points are extreme
        let f3 = generic_face_dimension_trial(4, 1, 50, 3).unwrap();
        assert_relative_eq!(f3, 1.0, epsilon = 0.0);
    }

    #[test]
    fn extreme_reports_respect_the_rank_bound() {
        // sampled instances: every is_extreme report has p <= floor(p*)
        for seed in 0..20 {
            let (m, d, p) = (6, 1, 2);
            let y = random_point(manifold(m, d, p), 400 + seed);
            let r = face_dimension(&y, DEFAULT_KERNEL_TOL).unwrap();
            if r.is_extreme {
                assert!(r.p as f64 <= r.p_star.floor() + 1e-12);
            }
        }
    }

    #[test]
    fn apply_cost_matches_the_flop_formula() {
        // operation-count accounting at the formula level
        for (m, d, p) in [(10usize, 3usize, 4usize), (50, 2, 8), (7, 1, 3)] {
            let spec = BlockSpec::new(m, d).unwrap();
            let counted = face_gram_apply_flops(spec, p);
            let formula = m * (d * d * p + p * p * d);
            assert!(counted <= 4 * formula, "(m,d,p)=({m},{d},{p})");
            assert!(counted >= formula);
        }
    }
}
