//! Riemannian trust-region method with truncated conjugate gradients.
//!
//! Minimizes `g(Y) = f(YY^T)` over `St(d,p)^m`, converging to (approximately)
//! second-order critical points. The inner subproblem is solved by the
//! Steihaug-Toint truncated CG; the smallest Hessian eigenvalue is checked
//! separately through Lanczos on the projected operator.

use nalgebra::{DMatrix, DVector};

use crate::costs::{grad_data, hess_apply_raw, CostModel, GradData};
use crate::eigs::{smallest_eigenpair_from, LanczosOptions, SymOp};
use crate::error::{Error, Result};
use crate::stiefel::{project_raw, retract_raw, StiefelPoint, TangentVector};

/// Trust-region hyperparameters. Defaults follow standard RTR practice:
/// maximum radius `sqrt(dim)`, initial radius an eighth of that, acceptance
/// ratio 0.1, inner stopping `|r| <= |r0| min(kappa, |r0|^theta)`.
#[derive(Clone, Debug)]
pub struct RtrOptions {
    /// Gradient norm target. Relative by default: the threshold is
    /// `grad_tol * max(1, |grad g(Y0)|)`.
    pub grad_tol: f64,
    /// Interpret `grad_tol` as an absolute threshold.
    pub grad_tol_absolute: bool,
    pub max_outer: usize,
    /// Maximum trust-region radius; `None` picks `sqrt(dim)`.
    pub max_radius: Option<f64>,
    /// Step acceptance threshold `rho'` in `(0, 1/4]`.
    pub rho_prime: f64,
    /// Linear-convergence factor of the inner stopping rule.
    pub kappa: f64,
    /// Superlinear exponent of the inner stopping rule.
    pub theta: f64,
    /// Inner iteration cap; `None` picks the manifold dimension.
    pub max_inner: Option<usize>,
    /// Replace analytic Hessian products by finite differences of the
    /// gradient along the retraction.
    pub fd_hessian: bool,
}

impl Default for RtrOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            grad_tol_absolute: false,
            max_outer: 1000,
            max_radius: None,
            rho_prime: 0.1,
            kappa: 0.1,
            theta: 1.0,
            max_inner: None,
            fd_hessian: false,
        }
    }
}

impl RtrOptions {
    fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0)
            || !(self.rho_prime > 0.0 && self.rho_prime <= 0.25)
            || !(self.kappa > 0.0)
            || !(self.theta > 0.0)
        {
            return Err(Error::InvalidArgument(
                "RTR options must be positive with rho_prime in (0, 1/4]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum RtrStatus {
    Converged,
    MaxIter,
}

/// Outcome of a trust-region run.
#[derive(Clone, Debug)]
pub struct RtrResult {
    pub y: StiefelPoint,
    pub grad_norm: f64,
    /// Outer iterations performed, counting the terminating check.
    pub iterations: usize,
    /// Cost at `Y0` followed by the cost after each accepted step.
    pub cost_trace: Vec<f64>,
    pub status: RtrStatus,
    /// The effective gradient threshold used for termination.
    pub grad_threshold: f64,
}

/// Why the inner CG loop stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcgReason {
    NegCurvature,
    Boundary,
    KappaTol,
    ThetaTol,
    MaxInner,
}

/// Per-iteration progress snapshot, for logging and CSV traces.
#[derive(Clone, Copy, Debug)]
pub struct RtrProgress {
    pub iteration: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub delta: f64,
    pub accepted: bool,
}

struct HessOp<'a> {
    model: &'a dyn CostModel,
    y: &'a StiefelPoint,
    gd: &'a GradData,
    fd: bool,
}

impl HessOp<'_> {
    fn apply(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if self.fd {
            fd_hessian(self.model, self.y, self.gd, z)
        } else {
            hess_apply_raw(self.model, self.y, self.gd, z)
        }
    }
}

/// Finite-difference Hessian product: gradients differenced along the
/// retraction and transported back by projection.
fn fd_hessian(
    model: &dyn CostModel,
    y: &StiefelPoint,
    gd: &GradData,
    z: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let zn = z.norm();
    if zn == 0.0 {
        return Ok(DMatrix::zeros(z.nrows(), z.ncols()));
    }
    let t = 1e-7 / zn;
    let moved = retract_raw(y, &(z * t))?;
    let gd_moved = grad_data(model, &moved)?;
    let transported = project_raw(y, &gd_moved.grad)?;
    Ok((transported - &gd.grad) / t)
}

/// Steihaug-Toint truncated conjugate gradient on the trust-region
/// subproblem `min <grad, s> + 1/2 <s, Hess s>` subject to `|s| <= delta`.
pub fn truncated_cg(
    model: &dyn CostModel,
    y: &StiefelPoint,
    grad: &TangentVector,
    delta: f64,
    opts: &RtrOptions,
) -> Result<(TangentVector, TcgReason)> {
    if !grad.base().same_point(y) {
        return Err(Error::BaseMismatch);
    }
    let gd = grad_data(model, y)?;
    let hess = HessOp {
        model,
        y,
        gd: &gd,
        fd: opts.fd_hessian,
    };
    let (s, reason) = tcg_raw(&hess, grad.matrix(), delta, opts, y.manifold().dim())?;
    Ok((TangentVector::new_unchecked(y.clone(), s), reason))
}

fn tcg_raw(
    hess: &HessOp<'_>,
    grad: &DMatrix<f64>,
    delta: f64,
    opts: &RtrOptions,
    dim: usize,
) -> Result<(DMatrix<f64>, TcgReason)> {
    let max_inner = opts.max_inner.unwrap_or(dim).max(1);
    let mut s = DMatrix::zeros(grad.nrows(), grad.ncols());
    let r0 = grad.norm();
    if r0 < 1e-300 {
        return Ok((s, TcgReason::KappaTol));
    }
    let kappa_stop = opts.kappa;
    let theta_stop = r0.powf(opts.theta);
    let stop = r0 * kappa_stop.min(theta_stop);
    let mut r = grad.clone();
    let mut d = -r.clone();
    let mut rr = r0 * r0;

    // boundary crossing: tau >= 0 with |s + tau d| = delta
    let boundary_tau = |s: &DMatrix<f64>, d: &DMatrix<f64>| -> f64 {
        let ss = s.norm_squared();
        let sd = s.dot(d);
        let dd = d.norm_squared();
        let disc = (sd * sd + dd * (delta * delta - ss)).max(0.0);
        (-sd + disc.sqrt()) / dd
    };

    for _ in 0..max_inner {
        let hd = hess.apply(&d)?;
        let dhd = d.dot(&hd);
        if dhd <= 0.0 {
            let tau = boundary_tau(&s, &d);
            s += &d * tau;
            return Ok((s, TcgReason::NegCurvature));
        }
        let alpha = rr / dhd;
        let s_new = &s + &d * alpha;
        if s_new.norm_squared() >= delta * delta {
            let tau = boundary_tau(&s, &d);
            s += &d * tau;
            return Ok((s, TcgReason::Boundary));
        }
        s = s_new;
        r += &hd * alpha;
        let rr_new = r.norm_squared();
        if rr_new.sqrt() <= stop {
            let reason = if kappa_stop <= theta_stop {
                TcgReason::KappaTol
            } else {
                TcgReason::ThetaTol
            };
            return Ok((s, reason));
        }
        let beta = rr_new / rr;
        d = -&r + d * beta;
        rr = rr_new;
    }
    Ok((s, TcgReason::MaxInner))
}

/// Minimizes `g` from `Y0`. Deterministic given its inputs; every accepted
/// step strictly decreases the cost.
pub fn minimize(
    model: &dyn CostModel,
    y0: &StiefelPoint,
    opts: &RtrOptions,
) -> Result<RtrResult> {
    minimize_with_callback(model, y0, opts, &mut |_| {})
}

/// As [`minimize`], invoking the callback after every outer iteration.
pub fn minimize_with_callback(
    model: &dyn CostModel,
    y0: &StiefelPoint,
    opts: &RtrOptions,
    callback: &mut dyn FnMut(RtrProgress),
) -> Result<RtrResult> {
    opts.validate()?;
    if model.spec() != y0.spec() {
        return Err(Error::DimensionMismatch(
            "cost model and initial point have different block structure".into(),
        ));
    }
    let dim = y0.manifold().dim();
    let delta_bar = opts.max_radius.unwrap_or((dim as f64).sqrt());
    let mut delta = delta_bar / 8.0;

    let mut y = y0.clone();
    let mut cost = model.value(&y);
    if !cost.is_finite() {
        return Err(Error::Numerical("non-finite cost at the initial point".into()));
    }
    let mut gd = grad_data(model, &y)?;
    let grad_threshold = if opts.grad_tol_absolute {
        opts.grad_tol
    } else {
        opts.grad_tol * gd.grad_norm.max(1.0)
    };
    let mut cost_trace = vec![cost];

    for iter in 1..=opts.max_outer {
        if gd.grad_norm <= grad_threshold {
            return Ok(RtrResult {
                y,
                grad_norm: gd.grad_norm,
                iterations: iter,
                cost_trace,
                status: RtrStatus::Converged,
                grad_threshold,
            });
        }
        let hess = HessOp {
            model,
            y: &y,
            gd: &gd,
            fd: opts.fd_hessian,
        };
        let (step, reason) = tcg_raw(&hess, &gd.grad, delta, opts, dim)?;
        let expanding = matches!(reason, TcgReason::Boundary | TcgReason::NegCurvature);

        let model_decrease = {
            let hs = hess.apply(&step)?;
            -(gd.grad.dot(&step) + 0.5 * step.dot(&hs))
        };

        let mut accepted = false;
        match retract_raw(&y, &step) {
            Ok(trial) => {
                let trial_cost = model.value(&trial);
                if trial_cost.is_finite() {
                    let reg = 1e3 * f64::EPSILON * cost.abs().max(1.0);
                    let rho = (cost - trial_cost + reg) / (model_decrease + reg);
                    if rho < 0.25 {
                        delta *= 0.25;
                    } else if rho > 0.75 && expanding {
                        delta = (2.0 * delta).min(delta_bar);
                    }
                    if rho > opts.rho_prime && trial_cost <= cost {
                        y = trial;
                        cost = trial_cost;
                        gd = grad_data(model, &y)?;
                        cost_trace.push(cost);
                        accepted = true;
                    }
                } else {
                    delta *= 0.25;
                }
            }
            Err(Error::RankDeficientSlice { .. }) => {
                // step left the retraction's safe region; shrink and retry
                delta *= 0.25;
            }
            Err(e) => return Err(e),
        }
        callback(RtrProgress {
            iteration: iter,
            cost,
            grad_norm: gd.grad_norm,
            delta,
            accepted,
        });
        if delta < 1e4 * f64::MIN_POSITIVE {
            break;
        }
    }
    Ok(RtrResult {
        grad_norm: gd.grad_norm,
        iterations: opts.max_outer,
        cost_trace,
        status: RtrStatus::MaxIter,
        grad_threshold,
        y,
    })
}

/// Smallest eigenpair outcome for the projected Hessian.
#[derive(Clone, Debug)]
pub struct HessianEig {
    pub value: f64,
    pub vector: TangentVector,
    pub residual: f64,
    /// False when Lanczos hit its iteration cap; the pair is then the best
    /// available estimate.
    pub converged: bool,
}

struct TangentHessOp<'a> {
    model: &'a dyn CostModel,
    y: &'a StiefelPoint,
    gd: &'a GradData,
    fd: bool,
}

impl TangentHessOp<'_> {
    fn unvec(&self, v: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.y.spec().n(), self.y.p(), v.as_slice())
    }
}

impl SymOp for TangentHessOp<'_> {
    fn dim(&self) -> usize {
        self.y.spec().n() * self.y.p()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let z = self.unvec(v);
        let z = project_raw(self.y, &z).expect("projection of well-shaped matrix");
        let hop = HessOp {
            model: self.model,
            y: self.y,
            gd: self.gd,
            fd: self.fd,
        };
        let h = hop.apply(&z).expect("Hessian application");
        DVector::from_column_slice(h.as_slice())
    }
}

/// Approximates the smallest eigenvalue of `Hess g(Y)` restricted to the
/// tangent space, by Lanczos on the projected operator. The Krylov space is
/// seeded with a projected random vector and stays tangent.
pub fn min_eig_hessian(
    model: &dyn CostModel,
    y: &StiefelPoint,
    tol: f64,
    seed: u64,
) -> Result<HessianEig> {
    if model.spec() != y.spec() {
        return Err(Error::DimensionMismatch(
            "cost model and point have different block structure".into(),
        ));
    }
    let gd = grad_data(model, y)?;
    let op = TangentHessOp {
        model,
        y,
        gd: &gd,
        fd: false,
    };
    let dim = op.dim();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let raw = DMatrix::from_fn(y.spec().n(), y.p(), |_, _| {
        rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
    });
    let start_mat = project_raw(y, &raw)?;
    let start = DVector::from_column_slice(start_mat.as_slice());
    let lopts = LanczosOptions {
        tol,
        max_basis: 120.min(dim),
        restarts: 6,
        seed,
    };
    let pair = smallest_eigenpair_from(&op, start, &lopts);
    let vec_mat = DMatrix::from_column_slice(y.spec().n(), y.p(), pair.vector.as_slice());
    let vec_mat = project_raw(y, &vec_mat)?;
    Ok(HessianEig {
        value: pair.value,
        vector: TangentVector::new_unchecked(y.clone(), vec_mat),
        residual: pair.residual,
        converged: pair.converged,
    })
}
