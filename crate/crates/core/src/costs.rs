//! Cost models `f` over the spectrahedron and their lifts `g(Y) = f(YY^T)`.
//!
//! A [`CostModel`] exposes `f(YY^T)`, products with the Euclidean gradient
//! `grad f(X) . V`, and Hessian terms `hess f(X)[Xdot] . Y` -- everything the
//! Riemannian machinery needs without materializing `X`. Dense `value_at` /
//! `egrad_at` paths exist for diagnostics on small `n`.
//!
//! Three concrete models: linear `<C, X>`, the pseudo-Huber measurement cost
//! (strongly concave), and the smoothed least-unsquared-deviations cost
//! (convex). The derivative conventions follow
//! `grad g(Y) = 2 Proj_Y(grad f(X) Y)` and
//! `hess g(Y)[Z] = 2 (hess f(X)[Xdot] Y + grad f(X) Z)` with
//! `Xdot = Z Y^T + Y Z^T`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::blockmat::{BlockDiag, BlockSpec, SymBlockMatrix};
use crate::error::{Error, Result};
use crate::stiefel::{project_raw, StiefelPoint, TangentVector};

/// Convexity class of `f` on the symmetric matrices; drives the staircase
/// rank cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvexityClass {
    Linear,
    Concave,
    StronglyConcave,
    Convex,
    General,
}

/// A twice differentiable cost over the symmetric matrices, accessed through
/// its lift to `St(d,p)^m`.
pub trait CostModel: Send + Sync {
    fn spec(&self) -> BlockSpec;

    fn convexity_class(&self) -> ConvexityClass;

    /// `g(Y) = f(Y Y^T)`, evaluated without materializing `X`.
    fn value(&self, y: &StiefelPoint) -> f64;

    /// `grad f(Y Y^T) . V` for an arbitrary `n x q` matrix `V`.
    ///
    /// Block-diagonal parts of `grad f` enter neither the Riemannian gradient
    /// nor the dual matrix `S`; implementations may pick any block-diagonal
    /// convention as long as it is consistent across calls.
    fn egrad_apply(&self, y: &StiefelPoint, v: &DMatrix<f64>) -> DMatrix<f64>;

    /// `hess f(X)[Xdot] . Y` with `Xdot = Z Y^T + Y Z^T`.
    fn ehess_apply(&self, y: &StiefelPoint, z: &DMatrix<f64>) -> DMatrix<f64>;

    /// Magnitude of `grad f(Y Y^T)` used to scale certificate tolerances.
    fn egrad_scale(&self, y: &StiefelPoint) -> f64;

    /// `f(X)` at a dense symmetric `X`. Diagnostics; `O(n^2)` or worse.
    fn value_at(&self, x: &DMatrix<f64>) -> f64;

    /// Dense `grad f(X)`. Diagnostics.
    fn egrad_at(&self, x: &DMatrix<f64>) -> DMatrix<f64>;

    /// Concrete linear-cost view when the model is one; enables the
    /// closed-form escape step of the staircase.
    fn as_linear(&self) -> Option<&LinearCost> {
        None
    }
}

// ---------------------------------------------------------------------------
// Linear cost f(X) = <C, X>
// ---------------------------------------------------------------------------

/// `f(X) = <C, X>`; `grad f = C`, `hess f = 0`.
#[derive(Clone, Debug)]
pub struct LinearCost {
    c: SymBlockMatrix,
}

impl LinearCost {
    pub fn new(c: SymBlockMatrix) -> Self {
        Self { c }
    }

    pub fn matrix(&self) -> &SymBlockMatrix {
        &self.c
    }
}

impl CostModel for LinearCost {
    fn spec(&self) -> BlockSpec {
        self.c.spec()
    }

    fn convexity_class(&self) -> ConvexityClass {
        ConvexityClass::Linear
    }

    fn value(&self, y: &StiefelPoint) -> f64 {
        // <C, YY^T> = <CY, Y>
        self.c
            .apply(y.matrix())
            .expect("spec checked at model boundary")
            .dot(y.matrix())
    }

    fn egrad_apply(&self, _y: &StiefelPoint, v: &DMatrix<f64>) -> DMatrix<f64> {
        self.c.apply(v).expect("spec checked at model boundary")
    }

    fn ehess_apply(&self, y: &StiefelPoint, _z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.spec().n(), y.p())
    }

    fn egrad_scale(&self, _y: &StiefelPoint) -> f64 {
        self.c.frob_norm()
    }

    fn value_at(&self, x: &DMatrix<f64>) -> f64 {
        self.c.inner_dense(x).expect("spec checked at model boundary")
    }

    fn egrad_at(&self, _x: &DMatrix<f64>) -> DMatrix<f64> {
        self.c.to_dense()
    }

    fn as_linear(&self) -> Option<&LinearCost> {
        Some(self)
    }
}

// ---------------------------------------------------------------------------
// Pseudo-Huber measurement cost (strongly concave)
// ---------------------------------------------------------------------------

/// Robust synchronization cost
/// `f(X) = sum_{i,j} sqrt(|H_ij|^2 + |I_d|^2 - 2<H_ij, X_ij> + eps^2) - eps`.
///
/// Stored diagonal blocks of `H` must equal `I_d`; missing blocks are implied
/// identities. Terms range over stored measurement blocks. Diagonal terms are
/// identically zero on the feasible set and are skipped in `value`.
#[derive(Clone, Debug)]
pub struct PseudoHuberCost {
    h: SymBlockMatrix,
    eps: f64,
}

impl PseudoHuberCost {
    pub fn new(h: SymBlockMatrix, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "smoothing parameter must be positive, got {eps}"
            )));
        }
        validate_measurement_diagonal(&h)?;
        Ok(Self { h, eps })
    }

    pub fn measurements(&self) -> &SymBlockMatrix {
        &self.h
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// `r_ij = sqrt(|H_ij|^2 + d - 2 <H_ij, X_ij> + eps^2)`; always >= eps on
    /// the feasible set (it equals `sqrt(|H_ij Y_j - Y_i|^2 + eps^2)`).
    fn radius(&self, hb: &DMatrix<f64>, s: f64) -> f64 {
        let d = self.spec().d() as f64;
        (hb.norm_squared() + d - 2.0 * s + self.eps * self.eps)
            .max(1e-300)
            .sqrt()
    }
}

fn validate_measurement_diagonal(h: &SymBlockMatrix) -> Result<()> {
    let d = h.spec().d();
    let eye = DMatrix::identity(d, d);
    let mut bad = None;
    h.for_each_upper_block(|i, j, b| {
        if i == j && bad.is_none() {
            let dev = (b.into_owned() - &eye).norm();
            if dev > 1e-10 * (d as f64).sqrt() {
                bad = Some((i, dev));
            }
        }
    });
    match bad {
        Some((i, dev)) => Err(Error::InvalidArgument(format!(
            "measurement block H_{{{i},{i}}} deviates from identity by {dev:.3e}"
        ))),
        None => Ok(()),
    }
}

/// `<H_ij, Y_i Y_j^T>` without forming the product: `<H_ij Y_j, Y_i>`.
fn block_inner(h: &DMatrix<f64>, yi: &DMatrix<f64>, yj: &DMatrix<f64>) -> f64 {
    (h * yj).dot(yi)
}

fn slice_of(m: &DMatrix<f64>, spec: BlockSpec, i: usize) -> DMatrix<f64> {
    m.view((i * spec.d(), 0), (spec.d(), m.ncols())).into_owned()
}

impl CostModel for PseudoHuberCost {
    fn spec(&self) -> BlockSpec {
        self.h.spec()
    }

    fn convexity_class(&self) -> ConvexityClass {
        ConvexityClass::StronglyConcave
    }

    fn value(&self, y: &StiefelPoint) -> f64 {
        let spec = self.spec();
        let mut total = 0.0;
        self.h.for_each_upper_block(|i, j, hb| {
            if i == j {
                return; // exactly zero at feasible X
            }
            let hb = hb.into_owned();
            let s = block_inner(&hb, &slice_of(y.matrix(), spec, i), &slice_of(y.matrix(), spec, j));
            total += 2.0 * (self.radius(&hb, s) - self.eps);
        });
        total
    }

    fn egrad_apply(&self, y: &StiefelPoint, v: &DMatrix<f64>) -> DMatrix<f64> {
        let spec = self.spec();
        let d = spec.d();
        let mut out = DMatrix::zeros(spec.n(), v.ncols());
        self.h.for_each_upper_block(|i, j, hb| {
            if i == j {
                return; // block-diagonal convention: omitted
            }
            let hb = hb.into_owned();
            let yi = slice_of(y.matrix(), spec, i);
            let yj = slice_of(y.matrix(), spec, j);
            let w = -1.0 / self.radius(&hb, block_inner(&hb, &yi, &yj));
            let vj = v.view((j * d, 0), (d, v.ncols()));
            out.view_mut((i * d, 0), (d, v.ncols())).gemm(w, &hb, &vj, 1.0);
            let vi = v.view((i * d, 0), (d, v.ncols()));
            out.view_mut((j * d, 0), (d, v.ncols())).gemm_tr(w, &hb, &vi, 1.0);
        });
        out
    }

    fn ehess_apply(&self, y: &StiefelPoint, z: &DMatrix<f64>) -> DMatrix<f64> {
        let spec = self.spec();
        let d = spec.d();
        let p = y.p();
        let mut out = DMatrix::zeros(spec.n(), p);
        self.h.for_each_upper_block(|i, j, hb| {
            if i == j {
                return; // Xdot_ii = 0 on the tangent space
            }
            let hb = hb.into_owned();
            let yi = slice_of(y.matrix(), spec, i);
            let yj = slice_of(y.matrix(), spec, j);
            let zi = z.view((i * d, 0), (d, p)).into_owned();
            let zj = z.view((j * d, 0), (d, p)).into_owned();
            let r = self.radius(&hb, block_inner(&hb, &yi, &yj));
            // sdot = <H_ij, Xdot_ij>, Xdot_ij = Z_i Y_j^T + Y_i Z_j^T
            let xdot = &zi * yj.transpose() + &yi * zj.transpose();
            let sdot = hb.dot(&xdot);
            let coeff = -sdot / (r * r * r);
            out.view_mut((i * d, 0), (d, p)).gemm(coeff, &hb, &yj, 1.0);
            out.view_mut((j * d, 0), (d, p)).gemm_tr(coeff, &hb, &yi, 1.0);
        });
        out
    }

    fn egrad_scale(&self, y: &StiefelPoint) -> f64 {
        let spec = self.spec();
        let mut acc = 0.0;
        self.h.for_each_upper_block(|i, j, hb| {
            if i == j {
                return;
            }
            let hb = hb.into_owned();
            let s = block_inner(&hb, &slice_of(y.matrix(), spec, i), &slice_of(y.matrix(), spec, j));
            let r = self.radius(&hb, s);
            acc += 2.0 * hb.norm_squared() / (r * r);
        });
        acc.sqrt()
    }

    fn value_at(&self, x: &DMatrix<f64>) -> f64 {
        let spec = self.spec();
        let d = spec.d();
        let mut total = 0.0;
        self.h.for_each_upper_block(|i, j, hb| {
            if i == j {
                return;
            }
            let hb = hb.into_owned();
            let xij = x.view((i * d, j * d), (d, d)).into_owned();
            total += 2.0 * (self.radius(&hb, hb.dot(&xij)) - self.eps);
        });
        // diagonal terms with the implied H_ii = I_d
        for i in 0..spec.m() {
            let tr = x.view((i * d, i * d), (d, d)).trace();
            let rad = (2.0 * d as f64 - 2.0 * tr + self.eps * self.eps).max(1e-300);
            total += rad.sqrt() - self.eps;
        }
        total
    }

    fn egrad_at(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let spec = self.spec();
        let d = spec.d();
        let n = spec.n();
        let mut out = DMatrix::zeros(n, n);
        self.h.for_each_upper_block(|i, j, hb| {
            if i == j {
                return;
            }
            let hb = hb.into_owned();
            let xij = x.view((i * d, j * d), (d, d)).into_owned();
            let w = -1.0 / self.radius(&hb, hb.dot(&xij));
            out.view_mut((i * d, j * d), (d, d)).copy_from(&(&hb * w));
            out.view_mut((j * d, i * d), (d, d)).copy_from(&(hb.transpose() * w));
        });
        for i in 0..spec.m() {
            let tr = x.view((i * d, i * d), (d, d)).trace();
            let r = (2.0 * d as f64 - 2.0 * tr + self.eps * self.eps)
                .max(1e-300)
                .sqrt();
            let block = DMatrix::identity(d, d) * (-1.0 / r);
            out.view_mut((i * d, i * d), (d, d)).copy_from(&block);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Smoothed least-unsquared-deviations cost (convex)
// ---------------------------------------------------------------------------

/// `f(X) = sum_{i != j} l_eps(|X_ij - H_ij|_F)` with
/// `l_eps(x) = sqrt(x^2 + eps^2) - eps`.
///
/// Gradient blocks `w_ij (X_ij - H_ij)` with `w_ij = 1/sqrt(r^2 + eps^2)`
/// stay finite as `r -> 0`. Terms range over stored off-diagonal blocks.
#[derive(Clone, Debug)]
pub struct SmoothedLudCost {
    h: SymBlockMatrix,
    eps: f64,
}

impl SmoothedLudCost {
    pub fn new(h: SymBlockMatrix, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "smoothing parameter must be positive, got {eps}"
            )));
        }
        Ok(Self { h, eps })
    }

    pub fn measurements(&self) -> &SymBlockMatrix {
        &self.h
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    fn q_of(&self, residual_sq: f64) -> f64 {
        (residual_sq + self.eps * self.eps).sqrt()
    }
}

impl CostModel for SmoothedLudCost {
    fn spec(&self) -> BlockSpec {
        self.h.spec()
    }

    fn convexity_class(&self) -> ConvexityClass {
        ConvexityClass::Convex
    }

    fn value(&self, y: &StiefelPoint) -> f64 {
        let mut total = 0.0;
        self.h.for_each_upper_block(|i, j, hb| {
            if i == j {
                return;
            }
            let e = y.x_block(i, j) - hb.into_owned();
            total += 2.0 * (self.q_of(e.norm_squared()) - self.eps);
        });
        total
    }

    fn egrad_apply(&self, y: &StiefelPoint, v: &DMatrix<f64>) -> DMatrix<f64> {
        let spec = self.spec();
        let d = spec.d();
        let mut out = DMatrix::zeros(spec.n(), v.ncols());
        self.h.for_each_upper_block(|i, j, hb| {
            if i == j {
                return;
            }
            let e = y.x_block(i, j) - hb.into_owned();
            let w = 1.0 / self.q_of(e.norm_squared());
            let vj = v.view((j * d, 0), (d, v.ncols()));
            out.view_mut((i * d, 0), (d, v.ncols())).gemm(w, &e, &vj, 1.0);
            let vi = v.view((i * d, 0), (d, v.ncols()));
            out.view_mut((j * d, 0), (d, v.ncols())).gemm_tr(w, &e, &vi, 1.0);
        });
        out
    }

    fn ehess_apply(&self, y: &StiefelPoint, z: &DMatrix<f64>) -> DMatrix<f64> {
        let spec = self.spec();
        let d = spec.d();
        let p = y.p();
        let mut out = DMatrix::zeros(spec.n(), p);
        self.h.for_each_upper_block(|i, j, hb| {
            if i == j {
                return;
            }
            let yi = slice_of(y.matrix(), spec, i);
            let yj = slice_of(y.matrix(), spec, j);
            let zi = z.view((i * d, 0), (d, p)).into_owned();
            let zj = z.view((j * d, 0), (d, p)).into_owned();
            let e = &yi * yj.transpose() - hb.into_owned();
            let q = self.q_of(e.norm_squared());
            let w = 1.0 / q;
            let xdot = &zi * yj.transpose() + &yi * zj.transpose();
            // d/dt [w(E + t Xdot) (E + t Xdot)] at t = 0
            let block = &xdot * w - &e * (e.dot(&xdot) / (q * q * q));
            out.view_mut((i * d, 0), (d, p)).gemm(1.0, &block, &yj, 1.0);
            out.view_mut((j * d, 0), (d, p)).gemm_tr(1.0, &block, &yi, 1.0);
        });
        out
    }

    fn egrad_scale(&self, y: &StiefelPoint) -> f64 {
        let mut acc = 0.0;
        self.h.for_each_upper_block(|i, j, hb| {
            if i == j {
                return;
            }
            let e = y.x_block(i, j) - hb.into_owned();
            let w = 1.0 / self.q_of(e.norm_squared());
            acc += 2.0 * w * w * e.norm_squared();
        });
        acc.sqrt()
    }

    fn value_at(&self, x: &DMatrix<f64>) -> f64 {
        let d = self.spec().d();
        let mut total = 0.0;
        self.h.for_each_upper_block(|i, j, hb| {
            if i == j {
                return;
            }
            let e = x.view((i * d, j * d), (d, d)).into_owned() - hb.into_owned();
            total += 2.0 * (self.q_of(e.norm_squared()) - self.eps);
        });
        total
    }

    fn egrad_at(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let spec = self.spec();
        let d = spec.d();
        let n = spec.n();
        let mut out = DMatrix::zeros(n, n);
        self.h.for_each_upper_block(|i, j, hb| {
            if i == j {
                return;
            }
            let e = x.view((i * d, j * d), (d, d)).into_owned() - hb.into_owned();
            let w = 1.0 / self.q_of(e.norm_squared());
            out.view_mut((i * d, j * d), (d, d)).copy_from(&(&e * w));
            out.view_mut((j * d, i * d), (d, d)).copy_from(&(e.transpose() * w));
        });
        out
    }
}

// ---------------------------------------------------------------------------
// Lifted derivatives
// ---------------------------------------------------------------------------

/// Euclidean gradient data at `Y`, shared by the gradient, the Hessian
/// operator and the dual matrix `S`.
pub(crate) struct GradData {
    /// `grad f(X) . Y` (`n x p`).
    pub egrad_y: DMatrix<f64>,
    /// `Lambda = symblockdiag(grad f(X) X)`.
    pub lambda: BlockDiag,
    /// Riemannian gradient `2 (egrad_y - Lambda Y)` (`n x p`).
    pub grad: DMatrix<f64>,
    pub grad_norm: f64,
}

pub(crate) fn grad_data(model: &dyn CostModel, y: &StiefelPoint) -> Result<GradData> {
    let egrad_y = model.egrad_apply(y, y.matrix());
    // (grad f(X) X)_ii = (grad f(X) Y)_i Y_i^T
    let lambda = BlockDiag::sym_product(y.spec(), &egrad_y, y.matrix())?;
    let grad = (&egrad_y - lambda.apply(y.matrix())?) * 2.0;
    let grad_norm = grad.norm();
    if !grad_norm.is_finite() {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    Ok(GradData {
        egrad_y,
        lambda,
        grad,
        grad_norm,
    })
}

/// Riemannian Hessian application on a raw (already tangent) matrix.
pub(crate) fn hess_apply_raw(
    model: &dyn CostModel,
    y: &StiefelPoint,
    gd: &GradData,
    z: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let term = model.ehess_apply(y, z) + model.egrad_apply(y, z) - gd.lambda.apply(z)?;
    project_raw(y, &(term * 2.0))
}

fn check_model_point(model: &dyn CostModel, y: &StiefelPoint) -> Result<()> {
    if model.spec() != y.spec() {
        return Err(Error::DimensionMismatch(format!(
            "model has m = {}, d = {}; point has m = {}, d = {}",
            model.spec().m(),
            model.spec().d(),
            y.spec().m(),
            y.spec().d()
        )));
    }
    Ok(())
}

/// `g(Y) = f(Y Y^T)`.
pub fn g(model: &dyn CostModel, y: &StiefelPoint) -> Result<f64> {
    check_model_point(model, y)?;
    let v = model.value(y);
    if !v.is_finite() {
        return Err(Error::Numerical("non-finite cost value".into()));
    }
    Ok(v)
}

/// `grad g(Y) = Proj_Y(2 grad f(X) Y)`.
pub fn riemannian_gradient(model: &dyn CostModel, y: &StiefelPoint) -> Result<TangentVector> {
    check_model_point(model, y)?;
    let gd = grad_data(model, y)?;
    Ok(TangentVector::new_unchecked(y.clone(), gd.grad))
}

/// `Hess g(Y)[Z] = Proj_Y(hess g(Y)[Z] - symblockdiag(grad g(Y) Y^T) Z)`.
pub fn riemannian_hessian(
    model: &dyn CostModel,
    y: &StiefelPoint,
    z: &TangentVector,
) -> Result<TangentVector> {
    check_model_point(model, y)?;
    if !z.base().same_point(y) {
        return Err(Error::BaseMismatch);
    }
    let gd = grad_data(model, y)?;
    let h = hess_apply_raw(model, y, &gd, z.matrix())?;
    Ok(TangentVector::new_unchecked(y.clone(), h))
}

/// Dense pseudo-Huber gradient blocks, the display formula
/// `grad f(X)_ij = -H_ij / sqrt(|H_ij|^2 + d - 2 <H_ij, X_ij> + eps^2)`.
pub fn pseudo_huber_gradient_blocks(
    h: &SymBlockMatrix,
    eps: f64,
    x: &DMatrix<f64>,
) -> Result<SymBlockMatrix> {
    let model = PseudoHuberCost::new(h.clone(), eps)?;
    let n = h.spec().n();
    if x.nrows() != n || x.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "expected {n} x {n} matrix, got {} x {}",
            x.nrows(),
            x.ncols()
        )));
    }
    SymBlockMatrix::from_dense(h.spec(), model.egrad_at(x))
}
