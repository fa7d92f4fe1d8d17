//! The Riemannian Staircase: rank escalation with dual certification.
//!
//! At each rank `p` of the schedule, RTR descends to an (approximately)
//! second-order critical point `Y`. If the dual matrix `S(YY^T)` is positive
//! semidefinite, `X = YY^T` is a KKT point and the solve is certified. If `Y`
//! is rank deficient the theory guarantees `S >= 0` at exact second-order
//! critical points; either way the staircase stops and reports. Otherwise the
//! saddle is escaped: `Y` is padded with a zero column and moved along
//! `u e_{p+1}^T`, where `u` is the negative eigenvector of `S`, with a step
//! from the quartic model (linear costs) or Armijo backtracking.

use std::time::Instant;

use crate::certificate::{
    build_certificate, escape_backtracking, escape_direction, escape_step_size, Certificate,
    EscapeMode, SdpBounds,
};
use crate::costs::{ConvexityClass, CostModel};
use crate::eigs::sorted_symmetric_eigen;
use crate::error::{Error, Result};
use crate::faces::{face_dimension, in_face_rank_reduction, p_star, FaceReport, RankReduction};
use crate::rtr::{min_eig_hessian, minimize_with_callback, RtrOptions, RtrProgress};
use crate::stiefel::{
    append_zero_columns, polar_factor, random_point, rank_deficiency, retract_raw, ManifoldSpec,
    StiefelPoint,
};

/// Rank ceiling implied by the convexity class: `floor(p*) + 1` for strongly
/// concave costs, `floor((d+1)/(d+3) n) + 1` for concave and linear costs,
/// `n` otherwise.
pub fn rank_cap(class: ConvexityClass, spec: crate::blockmat::BlockSpec) -> usize {
    let n = spec.n();
    let d = spec.d();
    let cap = match class {
        ConvexityClass::StronglyConcave => p_star(spec).floor() as usize + 1,
        ConvexityClass::Linear | ConvexityClass::Concave => (d + 1) * n / (d + 3) + 1,
        ConvexityClass::Convex | ConvexityClass::General => n,
    };
    cap.clamp(spec.d() + 1, n)
}

/// Staircase configuration.
#[derive(Clone, Debug)]
pub struct StaircaseOptions {
    /// First rank of the schedule; defaults to `d + 1`.
    pub p_first: Option<usize>,
    /// Last rank; defaults to (and is always clamped by) the class cap.
    pub p_max: Option<usize>,
    /// Explicit strictly increasing schedule overriding the `+1` walk.
    pub schedule: Option<Vec<usize>>,
    /// Condition-number threshold declaring `Y` rank deficient.
    pub cond_threshold: f64,
    /// Relative KKT tolerance on `lambda_min(S)`.
    pub kkt_tol: f64,
    pub rtr: RtrOptions,
    pub seed: u64,
    /// Run the in-face reduction loop when the schedule ends uncertified at a
    /// full-rank point of a concave cost.
    pub concave_postprocess: bool,
    /// Record `lambda_min(Hess g)` per stage (one extra Lanczos run each).
    pub hessian_spectrum: bool,
}

impl Default for StaircaseOptions {
    fn default() -> Self {
        Self {
            p_first: None,
            p_max: None,
            schedule: None,
            cond_threshold: 1e10,
            kkt_tol: 1e-8,
            rtr: RtrOptions::default(),
            seed: 0,
            concave_postprocess: false,
            hessian_spectrum: true,
        }
    }
}

impl StaircaseOptions {
    /// Resolves the rank schedule `d < p_1 < ... <= cap`.
    pub fn build_schedule(
        &self,
        spec: crate::blockmat::BlockSpec,
        class: ConvexityClass,
        start_at: Option<usize>,
    ) -> Result<Vec<usize>> {
        let d = spec.d();
        let cap = rank_cap(class, spec).min(self.p_max.unwrap_or(usize::MAX)).min(spec.n());
        if let Some(explicit) = &self.schedule {
            if explicit.is_empty() {
                return Err(Error::InvalidArgument("empty rank schedule".into()));
            }
            if explicit[0] <= d {
                return Err(Error::InvalidArgument(format!(
                    "schedule must start above d = {d}"
                )));
            }
            if explicit.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidArgument(
                    "rank schedule must be strictly increasing".into(),
                ));
            }
            let mut s: Vec<usize> = explicit.iter().cloned().filter(|&p| p <= cap).collect();
            if s.is_empty() {
                s.push(explicit[0].min(cap));
            }
            return Ok(s);
        }
        let first = start_at.unwrap_or_else(|| self.p_first.unwrap_or(d + 1));
        if first <= d {
            return Err(Error::InvalidArgument(format!(
                "first rank {first} must exceed d = {d}"
            )));
        }
        if first > spec.n() {
            return Err(Error::InvalidArgument(format!(
                "first rank {first} exceeds n = {}",
                spec.n()
            )));
        }
        Ok((first..=cap.max(first)).collect())
    }
}

/// How a staircase run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum SolveStatus {
    /// `S(X) >= 0`: `X` is a certified KKT point.
    Certified,
    /// The schedule ran out without certification.
    ScheduleExhausted,
    /// An escape direction existed but produced no measurable decrease.
    EscapeStalled,
}

/// Per-rank diagnostics.
#[derive(Clone, Debug, serde::Serialize)]
pub struct StageRecord {
    pub p: usize,
    pub rtr_iterations: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub lambda_min_s: f64,
    pub lambda_min_hess: Option<f64>,
    pub cond_gram: f64,
    pub numerical_rank: usize,
    pub escape: Option<EscapeRecord>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EscapeRecord {
    pub mode: EscapeMode,
    pub t: f64,
    /// `<Zdot, Hess g[Zdot]> = 2 u^T S u`.
    pub curvature: f64,
    pub decrease: f64,
}

/// Ranks of `X` and `S` against `n`; equality `rank X + rank S = n` is strict
/// complementarity.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct StrictComplementarity {
    pub rank_x: usize,
    pub rank_s: usize,
    pub n: usize,
    pub holds: bool,
}

/// Full trace of a staircase run.
#[derive(Clone, Debug)]
pub struct SolveReport {
    pub y: StiefelPoint,
    pub p: usize,
    pub cost: f64,
    pub kkt: bool,
    pub status: SolveStatus,
    pub lambda_min_s: f64,
    pub stages: Vec<StageRecord>,
    pub bounds: Option<SdpBounds>,
    pub face: Option<FaceReport>,
    pub strict_complementarity: Option<StrictComplementarity>,
    pub wall_time: f64,
    pub seed: u64,
}

/// Per-RTR-iteration trace row for CSV emission.
#[derive(Clone, Copy, Debug)]
pub struct TraceRow {
    pub iter: usize,
    pub p: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub delta: f64,
    pub time: f64,
}

/// Runs the staircase. `y0` warm-starts the first stage (its rank then heads
/// the schedule); otherwise the start is a seeded random point.
pub fn solve(
    model: &dyn CostModel,
    opts: &StaircaseOptions,
    y0: Option<StiefelPoint>,
) -> Result<SolveReport> {
    solve_traced(model, opts, y0, &mut |_| {})
}

/// As [`solve`], forwarding every RTR iteration to the callback.
pub fn solve_traced(
    model: &dyn CostModel,
    opts: &StaircaseOptions,
    y0: Option<StiefelPoint>,
    trace: &mut dyn FnMut(TraceRow),
) -> Result<SolveReport> {
    let start = Instant::now();
    let spec = model.spec();
    let class = model.convexity_class();
    let schedule = opts.build_schedule(spec, class, y0.as_ref().map(|y| y.p()))?;
    let mut y = match y0 {
        Some(y) => {
            if y.spec() != spec {
                return Err(Error::DimensionMismatch(
                    "warm start has a different block structure".into(),
                ));
            }
            if y.p() != schedule[0] {
                return Err(Error::InvalidArgument(format!(
                    "warm start rank {} does not match schedule head {}",
                    y.p(),
                    schedule[0]
                )));
            }
            y
        }
        None => random_point(ManifoldSpec::new(spec, schedule[0])?, opts.seed),
    };

    let mut stages: Vec<StageRecord> = Vec::new();
    let mut iter_offset = 0usize;

    for (stage_idx, &p) in schedule.iter().enumerate() {
        debug_assert_eq!(y.p(), p);
        let rtr_res = {
            let mut cb = |pr: RtrProgress| {
                trace(TraceRow {
                    iter: iter_offset + pr.iteration,
                    p,
                    cost: pr.cost,
                    grad_norm: pr.grad_norm,
                    delta: pr.delta,
                    time: start.elapsed().as_secs_f64(),
                });
            };
            minimize_with_callback(model, &y, &opts.rtr, &mut cb)?
        };
        iter_offset += rtr_res.iterations;
        y = rtr_res.y;
        let cost = model.value(&y);
        let rank = rank_deficiency(&y, opts.cond_threshold);
        let cert = build_certificate(model, &y, opts.kkt_tol, opts.seed ^ (p as u64) << 17)?;
        let lambda_min_hess = if opts.hessian_spectrum {
            Some(min_eig_hessian(model, &y, 1e-9, opts.seed ^ 0xbeef)?.value)
        } else {
            None
        };
        let mut stage = StageRecord {
            p,
            rtr_iterations: rtr_res.iterations,
            cost,
            grad_norm: rtr_res.grad_norm,
            lambda_min_s: cert.lambda_min,
            lambda_min_hess,
            cond_gram: rank.cond,
            numerical_rank: rank.numerical_rank,
            escape: None,
        };

        let last = stage_idx + 1 == schedule.len();
        if cert.kkt {
            stages.push(stage);
            return finalize(
                model, y, cost, true, SolveStatus::Certified, cert, stages, opts, start,
            );
        }
        if last || rank.deficient {
            // optional concave fallback: reduce inside the face, escape, repeat
            if opts.concave_postprocess
                && !rank.deficient
                && matches!(
                    class,
                    ConvexityClass::Linear
                        | ConvexityClass::Concave
                        | ConvexityClass::StronglyConcave
                )
            {
                stages.push(stage);
                let post = concave_postprocess(model, &y, opts)?;
                let cost = model.value(&post.y);
                let cert = build_certificate(model, &post.y, opts.kkt_tol, opts.seed ^ 0x77)?;
                let status = if post.kkt {
                    SolveStatus::Certified
                } else if post.stalled {
                    SolveStatus::EscapeStalled
                } else {
                    SolveStatus::ScheduleExhausted
                };
                return finalize(model, post.y, cost, post.kkt, status, cert, stages, opts, start);
            }
            stages.push(stage);
            return finalize(
                model,
                y,
                cost,
                false,
                SolveStatus::ScheduleExhausted,
                cert,
                stages,
                opts,
                start,
            );
        }

        // full rank, not certified, schedule continues: escape to the next rank
        let p_next = schedule[stage_idx + 1];
        let y_aug = append_zero_columns(&y, p_next)?;
        let near_critical = rtr_res.grad_norm <= 10.0 * rtr_res.grad_threshold;
        if near_critical {
            let esc = escape_direction(model, &y_aug, &cert)?;
            let step = match model_as_linear(model) {
                Some(lin) => escape_step_size(lin, &y_aug, &esc.u, &esc.z)?.t,
                None => escape_backtracking(model, &y_aug, &esc.u, &esc.z)?,
            };
            let moved = retract_raw(&y_aug, &(esc.direction.matrix() * step))?;
            let moved_cost = model.value(&moved);
            let mut decrease = cost - moved_cost;
            let mut accepted = moved;
            if decrease < 1e-12 * cost.abs().max(1.0) {
                // quartic step overshoots on rare ill-scaled instances; retry
                // with backtracking before declaring a stall
                if let Ok(t2) = escape_backtracking(model, &y_aug, &esc.u, &esc.z) {
                    let retry = retract_raw(&y_aug, &(esc.direction.matrix() * t2))?;
                    let retry_cost = model.value(&retry);
                    if cost - retry_cost >= 1e-12 * cost.abs().max(1.0) {
                        decrease = cost - retry_cost;
                        accepted = retry;
                    } else {
                        stage.escape = Some(EscapeRecord {
                            mode: esc.mode,
                            t: step,
                            curvature: esc.curvature,
                            decrease,
                        });
                        stages.push(stage);
                        return finalize(
                            model,
                            y,
                            cost,
                            false,
                            SolveStatus::EscapeStalled,
                            cert,
                            stages,
                            opts,
                            start,
                        );
                    }
                } else {
                    stages.push(stage);
                    return finalize(
                        model,
                        y,
                        cost,
                        false,
                        SolveStatus::EscapeStalled,
                        cert,
                        stages,
                        opts,
                        start,
                    );
                }
            }
            stage.escape = Some(EscapeRecord {
                mode: esc.mode,
                t: step,
                curvature: esc.curvature,
                decrease,
            });
            y = accepted;
        } else {
            // RTR stopped far from criticality (iteration cap); the escape
            // expansion is unreliable there, so just augment and descend
            y = y_aug;
        }
        stages.push(stage);
    }
    unreachable!("schedule loop always returns");
}

fn model_as_linear(model: &dyn CostModel) -> Option<&crate::costs::LinearCost> {
    model.as_linear()
}

#[allow(clippy::too_many_arguments)]
fn finalize(
    model: &dyn CostModel,
    y: StiefelPoint,
    cost: f64,
    kkt: bool,
    status: SolveStatus,
    cert: Certificate,
    stages: Vec<StageRecord>,
    opts: &StaircaseOptions,
    start: Instant,
) -> Result<SolveReport> {
    let spec = model.spec();
    let n = spec.n();
    let bounds = if matches!(model.convexity_class(), ConvexityClass::Linear) {
        Some(SdpBounds::from_value_and_lambda(cost, cert.lambda_min, n))
    } else {
        None
    };
    let rank = rank_deficiency(&y, opts.cond_threshold);
    let face = if !rank.deficient {
        face_dimension(&y, crate::faces::DEFAULT_KERNEL_TOL).ok()
    } else {
        None
    };
    let strict_complementarity = if n <= crate::certificate::DENSE_FALLBACK_LIMIT {
        let op = crate::certificate::DualOperator::new(model, &y)?;
        let s = op.to_dense();
        let (vals, _) = sorted_symmetric_eigen(&s);
        let smax = vals[vals.len() - 1].abs().max(vals[0].abs());
        let rank_s = vals.iter().filter(|&&l| l.abs() > 1e-8 * smax.max(1e-30)).count();
        let rank_x = rank.numerical_rank;
        Some(StrictComplementarity {
            rank_x,
            rank_s,
            n,
            holds: rank_x + rank_s == n,
        })
    } else {
        None
    };
    Ok(SolveReport {
        p: y.p(),
        cost,
        kkt,
        status,
        lambda_min_s: cert.lambda_min,
        stages,
        bounds,
        face,
        strict_complementarity,
        wall_time: start.elapsed().as_secs_f64(),
        seed: opts.seed,
        y,
    })
}

/// Outcome of the in-face reduction loop.
#[derive(Clone, Debug)]
pub struct PostprocessReport {
    pub y: StiefelPoint,
    pub kkt: bool,
    pub stalled: bool,
    pub reductions: usize,
    pub escapes: usize,
}

/// Concave fallback when the capped schedule ends full rank and uncertified:
/// alternate in-face rank reductions (non-increasing cost) with rank-deficient
/// escapes (strict decrease), re-descending after each escape, until the
/// certificate turns or the iteration cap `50 p` is reached.
pub fn concave_postprocess(
    model: &dyn CostModel,
    y: &StiefelPoint,
    opts: &StaircaseOptions,
) -> Result<PostprocessReport> {
    if !matches!(
        model.convexity_class(),
        ConvexityClass::Linear | ConvexityClass::Concave | ConvexityClass::StronglyConcave
    ) {
        return Err(Error::InvalidArgument(
            "in-face postprocessing applies to concave costs".into(),
        ));
    }
    let p_orig = y.p();
    let mut current = y.clone();
    let mut reductions = 0usize;
    let mut escapes = 0usize;
    let mut last_cost = model.value(&current);
    for round in 0..(50 * p_orig) {
        let cert = build_certificate(model, &current, opts.kkt_tol, opts.seed ^ round as u64)?;
        if cert.kkt {
            return Ok(PostprocessReport {
                y: current,
                kkt: true,
                stalled: false,
                reductions,
                escapes,
            });
        }
        let rank = rank_deficiency(&current, opts.cond_threshold);
        if rank.deficient {
            let esc = escape_direction(model, &current, &cert)?;
            let t = match model_as_linear(model) {
                Some(lin) => escape_step_size(lin, &current, &esc.u, &esc.z)?.t,
                None => escape_backtracking(model, &current, &esc.u, &esc.z)?,
            };
            let moved = retract_raw(&current, &(esc.direction.matrix() * t))?;
            let moved_cost = model.value(&moved);
            if last_cost - moved_cost < 1e-12 * last_cost.abs().max(1.0) {
                return Ok(PostprocessReport {
                    y: current,
                    kkt: false,
                    stalled: true,
                    reductions,
                    escapes,
                });
            }
            escapes += 1;
            let res = crate::rtr::minimize(model, &moved, &opts.rtr)?;
            current = res.y;
            last_cost = model.value(&current);
        } else {
            match in_face_rank_reduction(&current, crate::faces::DEFAULT_KERNEL_TOL)? {
                RankReduction::Reduced(smaller) => {
                    reductions += 1;
                    // keep the original embedding rank: pad back with zeros
                    current = if smaller.p() < p_orig {
                        append_zero_columns(&smaller, p_orig)?
                    } else {
                        smaller
                    };
                    let c = model.value(&current);
                    // concave costs do not increase along in-face moves
                    last_cost = c.min(last_cost);
                }
                RankReduction::NoKernel => {
                    return Ok(PostprocessReport {
                        y: current,
                        kkt: false,
                        stalled: true,
                        reductions,
                        escapes,
                    });
                }
            }
        }
    }
    Ok(PostprocessReport {
        y: current,
        kkt: false,
        stalled: true,
        reductions,
        escapes,
    })
}

/// Projects `Y_p` onto `St(d, q)^m` (leading `q` columns of the thin SVD,
/// slices re-orthonormalized) and re-descends at rank `q`.
pub fn round_to_rank(
    model: &dyn CostModel,
    y_p: &StiefelPoint,
    q: usize,
    rtr_opts: &RtrOptions,
) -> Result<crate::rtr::RtrResult> {
    let d = y_p.spec().d();
    if q < d {
        return Err(Error::InvalidArgument(format!(
            "target rank q = {q} must be at least d = {d}"
        )));
    }
    if q > y_p.p() {
        return Err(Error::InvalidArgument(format!(
            "target rank q = {q} exceeds current rank p = {}",
            y_p.p()
        )));
    }
    // nalgebra's svd sorts singular values in decreasing order
    let svd = y_p.matrix().clone().svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let mut us = u.columns(0, q).into_owned();
    for c in 0..q {
        let s = svd.singular_values[c];
        us.column_mut(c).scale_mut(s);
    }
    let mut out = nalgebra::DMatrix::zeros(y_p.spec().n(), q);
    for i in 0..y_p.spec().m() {
        let slice = us.view((i * d, 0), (d, q)).into_owned();
        let slice = polar_factor(slice, i)?;
        out.view_mut((i * d, 0), (d, q)).copy_from(&slice);
    }
    let y_q = StiefelPoint::from_matrix(ManifoldSpec::new(y_p.spec(), q)?, out)?;
    crate::rtr::minimize(model, &y_q, rtr_opts)
}
