//! Riemannian geometry of the product Stiefel manifold `St(d,p)^m`.
//!
//! Points are `n x p` matrices (`n = m * d`) whose `d x p` slices have
//! orthonormal rows. The manifold is the zero set of
//! `symblockdiag(Y Y^T) - I_n`, a Riemannian submanifold of `R^{n x p}` under
//! the Frobenius metric.

use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::blockmat::{BlockDiag, BlockSpec};
use crate::error::{Error, Result};

/// Feasibility tolerance for membership: `|symblockdiag(YY^T) - I|_F <= FEAS_TOL * sqrt(n)`.
pub const FEAS_TOL: f64 = 1e-10;

/// Singular values below this make a retraction slice rank deficient.
pub const RETRACT_SV_TOL: f64 = 1e-12;

/// Default condition-number threshold declaring `Y^T Y` rank deficient.
pub const DEFAULT_COND_THRESHOLD: f64 = 1e10;

/// The manifold `St(d,p)^m`: block structure plus relaxation rank `p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ManifoldSpec {
    spec: BlockSpec,
    p: usize,
}

impl ManifoldSpec {
    pub fn new(spec: BlockSpec, p: usize) -> Result<Self> {
        if p < spec.d() || p > spec.n() {
            return Err(Error::InvalidArgument(format!(
                "rank p = {p} must satisfy d = {} <= p <= n = {}",
                spec.d(),
                spec.n()
            )));
        }
        Ok(Self { spec, p })
    }

    pub fn spec(&self) -> BlockSpec {
        self.spec
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Manifold dimension `n p - m d(d+1)/2`.
    pub fn dim(&self) -> usize {
        let (m, d) = (self.spec.m(), self.spec.d());
        self.spec.n() * self.p - m * d * (d + 1) / 2
    }
}

/// A point on `St(d,p)^m`, row-stacked `d x p` slices.
///
/// Immutable after construction; clones share the underlying matrix.
#[derive(Clone, Debug)]
pub struct StiefelPoint {
    manifold: ManifoldSpec,
    y: Arc<DMatrix<f64>>,
}

impl StiefelPoint {
    /// Validates membership: every slice must satisfy `Y_i Y_i^T = I_d`.
    pub fn from_matrix(manifold: ManifoldSpec, y: DMatrix<f64>) -> Result<Self> {
        let (n, p) = (manifold.spec().n(), manifold.p());
        if y.nrows() != n || y.ncols() != p {
            return Err(Error::DimensionMismatch(format!(
                "expected {n} x {p} matrix, got {} x {}",
                y.nrows(),
                y.ncols()
            )));
        }
        let point = Self {
            manifold,
            y: Arc::new(y),
        };
        let res = point.feasibility_residual();
        if res > FEAS_TOL * (n as f64).sqrt() {
            return Err(Error::NotFeasible(res));
        }
        Ok(point)
    }

    pub(crate) fn from_matrix_unchecked(manifold: ManifoldSpec, y: DMatrix<f64>) -> Self {
        let point = Self {
            manifold,
            y: Arc::new(y),
        };
        debug_assert!(
            point.feasibility_residual() <= FEAS_TOL * (manifold.spec().n() as f64).sqrt()
        );
        point
    }

    pub fn manifold(&self) -> ManifoldSpec {
        self.manifold
    }

    pub fn spec(&self) -> BlockSpec {
        self.manifold.spec()
    }

    pub fn p(&self) -> usize {
        self.manifold.p()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// Slice `Y_i` (`d x p`).
    pub fn slice(&self, i: usize) -> DMatrixView<'_, f64> {
        let d = self.spec().d();
        self.y.view((i * d, 0), (d, self.p()))
    }

    /// `|symblockdiag(YY^T) - I_n|_F`, computed slice-wise.
    pub fn feasibility_residual(&self) -> f64 {
        let d = self.spec().d();
        let mut acc = 0.0;
        for i in 0..self.spec().m() {
            let s = self.slice(i);
            let g = &s * s.transpose() - DMatrix::identity(d, d);
            acc += g.norm_squared();
        }
        acc.sqrt()
    }

    /// Gram matrix `Y^T Y` (`p x p`).
    pub fn gram(&self) -> DMatrix<f64> {
        self.y.transpose() * self.y.as_ref()
    }

    /// The lifted matrix `X = Y Y^T`. Diagnostics only; `O(n^2 p)`.
    pub fn to_x(&self) -> DMatrix<f64> {
        self.y.as_ref() * self.y.transpose()
    }

    /// Block `X_{ij} = Y_i Y_j^T` without materializing `X`.
    pub fn x_block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.slice(i) * self.slice(j).transpose()
    }

    pub(crate) fn same_point(&self, other: &StiefelPoint) -> bool {
        self.manifold == other.manifold
            && (Arc::ptr_eq(&self.y, &other.y) || self.y == other.y)
    }
}

/// Tangent vector at a [`StiefelPoint`], same `n x p` layout.
#[derive(Clone, Debug)]
pub struct TangentVector {
    base: StiefelPoint,
    z: DMatrix<f64>,
}

impl TangentVector {
    /// Validates the tangency condition `symblockdiag(Z Y^T + Y Z^T) = 0`.
    pub fn new(base: StiefelPoint, z: DMatrix<f64>) -> Result<Self> {
        if z.nrows() != base.matrix().nrows() || z.ncols() != base.matrix().ncols() {
            return Err(Error::DimensionMismatch(format!(
                "tangent vector is {} x {}, base is {} x {}",
                z.nrows(),
                z.ncols(),
                base.matrix().nrows(),
                base.matrix().ncols()
            )));
        }
        let res = tangency_residual(&base, &z);
        if res > 1e-10 * z.norm().max(1.0) {
            return Err(Error::NotTangent(res));
        }
        Ok(Self { base, z })
    }

    pub(crate) fn new_unchecked(base: StiefelPoint, z: DMatrix<f64>) -> Self {
        debug_assert!(tangency_residual(&base, &z) <= 1e-8 * z.norm().max(1.0));
        Self { base, z }
    }

    pub fn base(&self) -> &StiefelPoint {
        &self.base
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn norm(&self) -> f64 {
        self.z.norm()
    }

    pub fn scaled(&self, t: f64) -> TangentVector {
        TangentVector {
            base: self.base.clone(),
            z: &self.z * t,
        }
    }
}

fn tangency_residual(base: &StiefelPoint, z: &DMatrix<f64>) -> f64 {
    let spec = base.spec();
    let d = spec.d();
    let mut acc = 0.0;
    for i in 0..spec.m() {
        let yi = base.slice(i);
        let zi = z.view((i * d, 0), (d, base.p()));
        let prod = &zi * yi.transpose();
        acc += (&prod + prod.transpose()).norm_squared();
    }
    acc.sqrt()
}

/// Nearest matrix with orthonormal rows: polar factor `U V^T` from a thin SVD.
///
/// Errors when a singular value falls below [`RETRACT_SV_TOL`].
pub(crate) fn polar_factor(mat: DMatrix<f64>, slice: usize) -> Result<DMatrix<f64>> {
    let svd = mat.svd(true, true);
    let sigma_min = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !sigma_min.is_finite() || sigma_min < RETRACT_SV_TOL {
        return Err(Error::RankDeficientSlice { slice, sigma_min });
    }
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    Ok(u * v_t)
}

/// Random point: each slice is the polar factor of an independent `d x p`
/// standard Gaussian matrix. Deterministic given the seed.
pub fn random_point(manifold: ManifoldSpec, seed: u64) -> StiefelPoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, d, p) = (manifold.spec().m(), manifold.spec().d(), manifold.p());
    let mut y = DMatrix::zeros(manifold.spec().n(), p);
    for i in 0..m {
        let gauss = DMatrix::from_fn(d, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        // A d x p Gaussian is almost surely full rank; retry on the null event.
        let slice = polar_factor(gauss, i).unwrap_or_else(|_| {
            let retry = DMatrix::from_fn(d, p, |_, _| rng.sample::<f64, _>(StandardNormal));
            polar_factor(retry, i).expect("Gaussian slice is full rank")
        });
        y.view_mut((i * d, 0), (d, p)).copy_from(&slice);
    }
    StiefelPoint::from_matrix_unchecked(manifold, y)
}

/// Orthogonal projection onto the tangent space:
/// `Proj_Y(Z) = Z - symblockdiag(Z Y^T) Y`. Costs `O(n d p)`.
pub fn project_tangent(y: &StiefelPoint, z: &DMatrix<f64>) -> Result<TangentVector> {
    let proj = project_raw(y, z)?;
    Ok(TangentVector::new_unchecked(y.clone(), proj))
}

pub(crate) fn project_raw(y: &StiefelPoint, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, p) = (y.spec().n(), y.p());
    if z.nrows() != n || z.ncols() != p {
        return Err(Error::DimensionMismatch(format!(
            "expected {n} x {p} matrix, got {} x {}",
            z.nrows(),
            z.ncols()
        )));
    }
    let sbd = BlockDiag::sym_product(y.spec(), z, y.matrix())?;
    Ok(z - sbd.apply(y.matrix())?)
}

/// Polar retraction: each slice of the result is the nearest orthonormal
/// matrix to `Y_i + Z_i` (thin SVD). This retraction is second order.
pub fn retract(y: &StiefelPoint, z: &TangentVector) -> Result<StiefelPoint> {
    if !z.base().same_point(y) {
        return Err(Error::BaseMismatch);
    }
    retract_raw(y, z.matrix())
}

pub(crate) fn retract_raw(y: &StiefelPoint, z: &DMatrix<f64>) -> Result<StiefelPoint> {
    let (d, p) = (y.spec().d(), y.p());
    let mut out = DMatrix::zeros(y.spec().n(), p);
    for i in 0..y.spec().m() {
        let moved = y.slice(i) + z.view((i * d, 0), (d, p));
        let slice = polar_factor(moved, i)?;
        out.view_mut((i * d, 0), (d, p)).copy_from(&slice);
    }
    Ok(StiefelPoint::from_matrix_unchecked(y.manifold(), out))
}

/// Riemannian metric: `trace(U^T V)`.
pub fn inner(u: &TangentVector, v: &TangentVector) -> Result<f64> {
    if !u.base().same_point(v.base()) {
        return Err(Error::BaseMismatch);
    }
    Ok(u.matrix().dot(v.matrix()))
}

/// Rank diagnostics of `Y` through the spectrum of its Gram matrix.
#[derive(Clone, Debug, serde::Serialize)]
pub struct RankReport {
    pub deficient: bool,
    pub numerical_rank: usize,
    pub cond: f64,
}

/// Declares `Y` rank deficient when `cond(Y^T Y) = l_max / l_min` exceeds the
/// threshold; `numerical_rank` counts eigenvalues above `l_max / threshold`.
pub fn rank_deficiency(y: &StiefelPoint, cond_threshold: f64) -> RankReport {
    let (lambda_min, lambda_max, _) = gram_extremes(y);
    let cond = if lambda_min <= 0.0 {
        f64::INFINITY
    } else {
        lambda_max / lambda_min
    };
    let gram = y.gram();
    let eig = gram.symmetric_eigen();
    let cutoff = lambda_max / cond_threshold;
    let numerical_rank = eig.eigenvalues.iter().filter(|&&l| l > cutoff).count();
    RankReport {
        deficient: cond > cond_threshold,
        numerical_rank,
        cond,
    }
}

/// Smallest Gram eigenpair; the eigenvector is the escape kernel direction.
pub(crate) fn gram_min_eigvec(y: &StiefelPoint) -> (f64, DVector<f64>) {
    let gram = y.gram();
    let eig = gram.symmetric_eigen();
    let mut k = 0;
    for (i, l) in eig.eigenvalues.iter().enumerate() {
        if *l < eig.eigenvalues[k] {
            k = i;
        }
    }
    (eig.eigenvalues[k], eig.eigenvectors.column(k).into_owned())
}

fn gram_extremes(y: &StiefelPoint) -> (f64, f64, DMatrix<f64>) {
    let gram = y.gram();
    let eig = gram.clone().symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for l in eig.eigenvalues.iter() {
        lo = lo.min(*l);
        hi = hi.max(*l);
    }
    (lo, hi, gram)
}

/// Embeds `Y` into `St(d, p_plus)^m` by appending zero columns; `Y_+ Y_+^T = Y Y^T`.
pub fn append_zero_columns(y: &StiefelPoint, p_plus: usize) -> Result<StiefelPoint> {
    let p = y.p();
    if p_plus <= p {
        return Err(Error::InvalidArgument(format!(
            "p_plus = {p_plus} must exceed current p = {p}"
        )));
    }
    let manifold = ManifoldSpec::new(y.spec(), p_plus)?;
    let mut out = DMatrix::zeros(y.spec().n(), p_plus);
    out.view_mut((0, 0), (y.spec().n(), p)).copy_from(y.matrix());
    Ok(StiefelPoint::from_matrix_unchecked(manifold, out))
}
