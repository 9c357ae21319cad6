//! The oblivious ellipsoid algorithm: ellipsoid update procedure and main loop.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::certificates::{
    argmax_violation, lift, resolve_type_q, slab_multiplier, type_l_from_bound_violation, TypeLCertificate,
    TypeQResolution, TOL_STRICT,
};
use crate::ellipsoid::{derive_state, EllipsoidState, DEFAULT_REFRESH_EVERY};
use crate::error::{Error, Result};
use crate::problem::{verify_certified_bounds, CertifiedBounds, Instance, ProblemData};

/// τ used when deriving the default iteration limit.
pub const TAU_FLOOR: f64 = 1e-9;
pub const MAX_ITER_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub tol_feas: f64,
    pub tol_f: f64,
    /// `None` derives the limit from the worst-case bound with `TAU_FLOOR`.
    pub max_iter: Option<usize>,
    pub trace_every: usize,
    pub refresh_every: usize,
    /// Re-verify certified bounds and update identities every iteration.
    pub check_invariants: bool,
    /// Only used for the potential column of the trace.
    pub tau_hint: Option<f64>,
    /// Upper limit on stored pairs for the deferred-certificate variant.
    pub mm_cap: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol_feas: 1e-9,
            tol_f: 1e-12,
            max_iter: None,
            trace_every: 1,
            refresh_every: DEFAULT_REFRESH_EVERY,
            check_invariants: cfg!(debug_assertions),
            tau_hint: None,
            mm_cap: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_feas > 0.0 && self.tol_f > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if self.max_iter == Some(0) {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        if let Some(t) = self.tau_hint {
            if !(t > 0.0) {
                return Err(Error::InvalidInput("tau hint must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn resolved_max_iter(&self, p: &ProblemData, l: &DVector<f64>) -> usize {
        self.max_iter.unwrap_or_else(|| default_max_iter(p.m(), (p.u() - l).norm()))
    }
}

/// `⌊2m(m+1) ln((m+1)‖u-ℓ‖ / (2mτ))⌋`, clamped at zero.
pub fn infeasible_iteration_bound(m: usize, ul_norm: f64, tau: f64) -> usize {
    let mf = m as f64;
    let v = 2.0 * mf * (mf + 1.0) * ((mf + 1.0) * ul_norm / (2.0 * mf * tau)).ln();
    if v.is_finite() && v > 0.0 {
        v.floor() as usize
    } else {
        0
    }
}

/// `⌊2n(m+1) ln(sqrt(m̂+2)‖hi-lo‖ / (2τ))⌋` for systems built from a box.
pub fn feasible_box_iteration_bound(n: usize, m: usize, m_hat: usize, diam: f64, tau: f64) -> usize {
    let v = 2.0 * n as f64 * (m as f64 + 1.0) * (((m_hat as f64 + 2.0).sqrt() * diam) / (2.0 * tau)).ln();
    if v.is_finite() && v > 0.0 {
        v.floor() as usize
    } else {
        0
    }
}

pub fn default_max_iter(m: usize, ul_norm: f64) -> usize {
    infeasible_iteration_bound(m, ul_norm, TAU_FLOOR).clamp(1, MAX_ITER_CAP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceEvent {
    None,
    Feasible,
    #[serde(rename = "typeL")]
    TypeL,
    Declared,
}

/// Which sub-solver a baseline trace row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Side {
    P,
    Alt,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTrace {
    pub iter: usize,
    pub f: f64,
    pub log_rel_volume: Option<f64>,
    pub phi: Option<f64>,
    pub j: usize,
    pub max_violation: f64,
    pub l_cert_updated: bool,
    pub event: TraceEvent,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub side: Option<Side>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeKind {
    Feasible(DVector<f64>),
    InfeasibleTypeL(TypeLCertificate),
    InfeasibleDeclared,
    IterLimit,
}

impl OutcomeKind {
    pub fn label(&self) -> &'static str {
        match self {
            OutcomeKind::Feasible(_) => "feasible",
            OutcomeKind::InfeasibleTypeL(_) => "infeasible",
            OutcomeKind::InfeasibleDeclared => "infeasible-declared",
            OutcomeKind::IterLimit => "iteration-limit",
        }
    }

    /// Process exit code for this outcome.
    pub fn exit_code(&self) -> i32 {
        match self {
            OutcomeKind::Feasible(_) => 0,
            OutcomeKind::InfeasibleTypeL(_) => 1,
            OutcomeKind::InfeasibleDeclared => 2,
            OutcomeKind::IterLimit => 3,
        }
    }
}

/// Work counters; `flops` is a dense-arithmetic estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct OpCounts {
    pub rank_one_updates: u64,
    pub refreshes: u64,
    pub lambda_updates: u64,
    pub flops: u64,
}

/// Quantities recorded for one call of the update procedure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateDiagnostics {
    pub iter: usize,
    pub j: usize,
    pub violation: f64,
    pub gamma: f64,
    /// `f(d, ℓ⁽¹⁾)`
    pub f_after_shift: f64,
    /// `a_j^T y(d, ℓ⁽¹⁾) - u_j`
    pub shift_residual: f64,
    /// `f(d⁽²⁾, ℓ⁽²⁾)`
    pub f_d2_l2: f64,
    pub alpha: f64,
    /// Max relative gap between `d⁽³⁾` and `α(d + 2/(m-1) γ_j⁻² e_j)`.
    pub d3_residual: f64,
    pub l2_j: f64,
    /// `max(ℓ_j, L_j)` before the update.
    pub l_bound: f64,
    pub log_volume_before: f64,
    pub log_volume_after: f64,
    /// `sqrt(f/d_j)` before the update.
    pub sqrt_f_over_dj: f64,
    pub log_phi_before: Option<f64>,
    pub log_phi_after: Option<f64>,
}

impl UpdateDiagnostics {
    pub fn f_target(m: usize) -> f64 {
        let m2 = (m * m) as f64;
        m2 / (m2 - 1.0)
    }

    pub fn alpha_floor(m: usize) -> f64 {
        let m2 = (m * m) as f64;
        (m2 - 1.0) / m2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub kind: OutcomeKind,
    /// Completed ellipsoid updates.
    pub iterations: usize,
    pub trace: Vec<IterationTrace>,
    pub updates: Vec<UpdateDiagnostics>,
    pub ops: OpCounts,
    /// Winning side for the baseline; per-side iteration counts.
    pub side: Option<Side>,
    pub side_iterations: Option<(usize, usize)>,
    /// Pairs stored by the deferred-certificate variant.
    pub stored_pairs: Option<usize>,
}

/// States around one update, for instrumentation.
pub struct UpdateContext<'a> {
    pub problem: &'a ProblemData,
    /// `(d, ℓ)` with `f = 1`.
    pub before: &'a EllipsoidState,
    /// `(d, ℓ⁽¹⁾)` before rescaling.
    pub shifted: &'a EllipsoidState,
    /// `(d⁽³⁾, ℓ⁽²⁾)`
    pub after: &'a EllipsoidState,
    pub diag: &'a UpdateDiagnostics,
}

pub trait SolverHooks {
    fn on_update(&mut self, _ctx: &UpdateContext<'_>) {}

    /// Called at start and after every completed update with the current bounds.
    fn on_iteration(&mut self, _p: &ProblemData, _state: &EllipsoidState, _lambda: Option<&DMatrix<f64>>) {}
}

pub struct NoHooks;

impl SolverHooks for NoHooks {}

/// Result of the ellipsoid update procedure.
#[derive(Debug, Clone, PartialEq)]
pub enum UpdateOutcome {
    Updated(EllipsoidState, UpdateDiagnostics),
    FeasiblePoint(DVector<f64>),
    Certificate(TypeLCertificate),
}

enum Step {
    Updated { shifted: EllipsoidState, after: EllipsoidState, diag: UpdateDiagnostics },
    Feasible(DVector<f64>),
    TypeQ(EllipsoidState),
}

fn log_phi(s: &EllipsoidState, tau: Option<f64>) -> Option<f64> {
    tau.and_then(|t| s.metrics(Some(t)).ok()).and_then(|m| m.log_phi)
}

fn update_step(p: &ProblemData, s: &EllipsoidState, j: usize, cfg: &SolverConfig, iter: usize) -> Result<Step> {
    let pre = UpdatePre::new(p, s, j, cfg)?;
    let mut w = s.clone();
    w.shift_l(p, j, pre.beta1(s));
    if p.is_feasible(&w.y, cfg.tol_feas) {
        return Ok(Step::Feasible(w.y));
    }
    if w.f_is_nonpositive(cfg.tol_f) {
        return Ok(Step::TypeQ(w));
    }
    let shifted = w.clone();
    let (after, diag) = finish_update(p, s, w, j, &pre, cfg, iter)?;
    Ok(Step::Updated { shifted, after, diag })
}

/// Applies the parameter update to `(d, ℓ)` without the feasibility exit on the shifted center.
///
/// Fails when the shifted ellipsoid has no positive volume.
pub fn update_parameters(
    p: &ProblemData,
    s: &EllipsoidState,
    j: usize,
    cfg: &SolverConfig,
) -> Result<(EllipsoidState, UpdateDiagnostics)> {
    let pre = UpdatePre::new(p, s, j, cfg)?;
    let mut w = s.clone();
    w.shift_l(p, j, pre.beta1(s));
    if w.f_is_nonpositive(cfg.tol_f) {
        return Err(Error::Precondition(format!("shifted ellipsoid is degenerate (f = {})", w.f)));
    }
    finish_update(p, s, w, j, &pre, cfg, 0)
}

struct UpdatePre {
    j: usize,
    viol: f64,
    gamma: f64,
    bound: f64,
    log_volume_before: f64,
    log_phi_before: Option<f64>,
}

impl UpdatePre {
    fn new(p: &ProblemData, s: &EllipsoidState, j: usize, cfg: &SolverConfig) -> Result<Self> {
        if (s.f - 1.0).abs() > 1e-8 {
            return Err(Error::Precondition(format!("update needs f = 1, got {}", s.f)));
        }
        let viol = p.a().column(j).dot(&s.y) - p.u()[j];
        let gamma = s.gamma(p, j)?;
        if !(viol > 0.0) || viol > gamma + TOL_STRICT {
            return Err(Error::Precondition(format!("update needs 0 < violation <= γ_j, got {viol} vs {gamma}")));
        }
        Ok(Self {
            j,
            viol,
            gamma,
            bound: viol + p.u()[j] - gamma,
            log_volume_before: s.metrics(None)?.log_rel_volume,
            log_phi_before: log_phi(s, cfg.tau_hint),
        })
    }

    /// Decrease of ℓ_j placing the center on the hyperplane `a_j^T x = u_j`.
    fn beta1(&self, s: &EllipsoidState) -> f64 {
        -2.0 * self.viol / (s.d[self.j] * self.gamma * self.gamma)
    }
}

fn finish_update(
    p: &ProblemData,
    s: &EllipsoidState,
    mut w: EllipsoidState,
    j: usize,
    pre: &UpdatePre,
    cfg: &SolverConfig,
    iter: usize,
) -> Result<(EllipsoidState, UpdateDiagnostics)> {
    let m = p.m();
    let mf = m as f64;
    let shift_residual = p.a().column(j).dot(&w.y) - p.u()[j];
    let f1 = w.f;
    w.rescale_unit_f(p)?;
    let g1 = w.gamma(p, j)?;
    let beta2 = 2.0 * (2.0 * w.v[j] - g1) / ((mf - 1.0) * w.d[j] * g1 * g1 + 2.0);
    let delta = 2.0 / ((mf - 1.0) * g1 * g1);
    w.shift_d(p, j, delta)?;
    w.shift_l(p, j, beta2);
    let f_d2_l2 = w.f;
    w.rescale_unit_f(p)?;

    let alpha = UpdateDiagnostics::alpha_floor(m) / f1;
    let mut d3_residual: f64 = 0.0;
    for i in 0..m {
        let mut pred = s.d[i];
        if i == j {
            pred += 2.0 / ((mf - 1.0) * pre.gamma * pre.gamma);
        }
        d3_residual = d3_residual.max((w.d[i] - alpha * pred).abs() / w.d[i]);
    }
    let diag = UpdateDiagnostics {
        iter,
        j,
        violation: pre.viol,
        gamma: pre.gamma,
        f_after_shift: f1,
        shift_residual,
        f_d2_l2,
        alpha,
        d3_residual,
        l2_j: w.l[j],
        l_bound: s.l[j].max(pre.bound),
        log_volume_before: pre.log_volume_before,
        log_volume_after: w.metrics(None)?.log_rel_volume,
        sqrt_f_over_dj: (1.0 / s.d[j]).sqrt(),
        log_phi_before: pre.log_phi_before,
        log_phi_after: log_phi(&w, cfg.tau_hint),
    };
    if cfg.check_invariants {
        check_update(p, &diag)?;
    }
    Ok((w, diag))
}

fn check_update(p: &ProblemData, d: &UpdateDiagnostics) -> Result<()> {
    let m = p.m();
    let scale = 1f64.max(p.u()[d.j].abs());
    if (d.f_d2_l2 - UpdateDiagnostics::f_target(m)).abs() > 1e-6 {
        return Err(Error::InvariantViolation(format!("f(d2, l2) = {} at iteration {}", d.f_d2_l2, d.iter)));
    }
    if d.shift_residual.abs() > 1e-6 * scale {
        return Err(Error::InvariantViolation(format!("shifted center misses u_j by {:e}", d.shift_residual)));
    }
    if d.l2_j > d.l_bound + 1e-6 * scale {
        return Err(Error::InvariantViolation(format!("l2_j = {} exceeds certified {}", d.l2_j, d.l_bound)));
    }
    Ok(())
}

/// One call of the ellipsoid update procedure with full certificate maintenance.
pub fn procedure_2(
    p: &ProblemData,
    s: &EllipsoidState,
    b: &CertifiedBounds,
    j: usize,
    cfg: &SolverConfig,
) -> Result<UpdateOutcome> {
    match update_step(p, s, j, cfg, 0)? {
        Step::Updated { after, diag, .. } => Ok(UpdateOutcome::Updated(after, diag)),
        Step::Feasible(x) => Ok(UpdateOutcome::FeasiblePoint(x)),
        Step::TypeQ(w) => {
            let c = crate::certificates::procedure_1_tol(p, &w, b, cfg.tol_f)?;
            Ok(UpdateOutcome::Certificate(c))
        }
    }
}

/// Lowest-index most violated constraint at the center.
pub fn most_violated(s: &EllipsoidState, p: &ProblemData) -> (usize, f64) {
    argmax_violation(&s.violations(p))
}

/// How a run maintains (or skips) the certificate matrix.
pub(crate) trait CertStrategy {
    fn tracks(&self) -> bool;
    /// Replace column `j` by `Λ λ̂^- + λ̂^+`.
    fn record(&mut self, p: &ProblemData, j: usize, lambda_hat: &DVector<f64>, ops: &mut OpCounts) -> Result<()>;
    /// `λ_j + e_j` for the current `Λ`, or `None` to declare infeasibility.
    fn certificate(&mut self, p: &ProblemData, j: usize, ops: &mut OpCounts) -> Result<Option<TypeLCertificate>>;
    fn lambda(&self) -> Option<&DMatrix<f64>>;
    fn stored_pairs(&self) -> Option<usize> {
        None
    }
}

pub(crate) struct FullLambda(pub DMatrix<f64>);

impl CertStrategy for FullLambda {
    fn tracks(&self) -> bool {
        true
    }

    fn record(&mut self, _p: &ProblemData, j: usize, lambda_hat: &DVector<f64>, ops: &mut OpCounts) -> Result<()> {
        let col = lift(&self.0, lambda_hat);
        self.0.set_column(j, &col);
        let m = col.len() as u64;
        ops.flops += 2 * m * m;
        ops.lambda_updates += 1;
        Ok(())
    }

    fn certificate(&mut self, p: &ProblemData, j: usize, _ops: &mut OpCounts) -> Result<Option<TypeLCertificate>> {
        type_l_from_bound_violation(p, &self.0.column(j).clone_owned(), j).map(Some)
    }

    fn lambda(&self) -> Option<&DMatrix<f64>> {
        Some(&self.0)
    }
}

pub(crate) struct NoLambda;

impl CertStrategy for NoLambda {
    fn tracks(&self) -> bool {
        false
    }

    fn record(&mut self, _: &ProblemData, _: usize, _: &DVector<f64>, _: &mut OpCounts) -> Result<()> {
        Ok(())
    }

    fn certificate(&mut self, _: &ProblemData, _: usize, _: &mut OpCounts) -> Result<Option<TypeLCertificate>> {
        Ok(None)
    }

    fn lambda(&self) -> Option<&DMatrix<f64>> {
        None
    }
}

fn finish(
    kind: OutcomeKind,
    iterations: usize,
    trace: Vec<IterationTrace>,
    updates: Vec<UpdateDiagnostics>,
    ops: OpCounts,
    stored_pairs: Option<usize>,
) -> Outcome {
    Outcome { kind, iterations, trace, updates, ops, side: None, side_iterations: None, stored_pairs }
}

pub(crate) fn run_with_strategy(
    inst: &Instance,
    cfg: &SolverConfig,
    strat: &mut dyn CertStrategy,
    hooks: &mut dyn SolverHooks,
) -> Result<Outcome> {
    cfg.validate()?;
    let p = &inst.problem;
    let rep = verify_certified_bounds(p, &inst.bounds, 1e-8)?;
    if !rep.pass {
        return Err(Error::InvariantViolation(format!(
            "initial bounds not certified (eq {:e}, min entry {:e}, slack {:e})",
            rep.eq_residual, rep.min_entry, rep.min_slack
        )));
    }
    let (n, m) = (p.n() as u64, p.m() as u64);
    let max_iter = cfg.resolved_max_iter(p, &inst.bounds.l);
    let mut s = derive_state(p, &inst.d0, &inst.bounds.l)?;
    let mut ops = OpCounts { flops: 2 * n * n * m + n * n * n, ..Default::default() };
    let mut trace = Vec::new();
    let mut updates = Vec::new();
    let mut k = 0usize;
    let every = cfg.trace_every.max(1);
    hooks.on_iteration(p, &s, strat.lambda());

    loop {
        let viol = s.violations(p);
        ops.flops += 2 * n * m;
        let (j, vmax) = argmax_violation(&viol);
        let metrics = if s.f > 0.0 { s.metrics(cfg.tau_hint).ok() } else { None };
        let mut row = IterationTrace {
            iter: k,
            f: s.f,
            log_rel_volume: metrics.as_ref().map(|m| m.log_rel_volume),
            phi: metrics.as_ref().and_then(|m| m.phi),
            j,
            max_violation: vmax,
            l_cert_updated: false,
            event: TraceEvent::None,
            side: None,
        };
        let emit = |trace: &mut Vec<IterationTrace>, row: IterationTrace, last: bool| {
            if last || row.iter % every == 0 {
                trace.push(row);
            }
        };
        let declare = |cert: Option<TypeLCertificate>| match cert {
            Some(c) => (OutcomeKind::InfeasibleTypeL(c), TraceEvent::TypeL),
            None => (OutcomeKind::InfeasibleDeclared, TraceEvent::Declared),
        };

        if vmax <= cfg.tol_feas {
            row.event = TraceEvent::Feasible;
            emit(&mut trace, row, true);
            return Ok(finish(OutcomeKind::Feasible(s.y.clone()), k, trace, updates, ops, strat.stored_pairs()));
        }
        if s.f_is_nonpositive(cfg.tol_f) {
            if k > 0 {
                log::warn!("f <= 0 after {k} updates; expected only at the first iteration");
            }
            let check = if cfg.check_invariants { strat.lambda().cloned() } else { None };
            let cert = match resolve_type_q(p, &s, cfg.tol_f, check.as_ref())? {
                TypeQResolution::BoundViolation { j } => strat.certificate(p, j, &mut ops)?,
                TypeQResolution::Slab { k: kk, lambda_hat } => {
                    if strat.tracks() {
                        strat.record(p, kk, &lambda_hat, &mut ops)?;
                    }
                    strat.certificate(p, kk, &mut ops)?
                }
            };
            let (kind, ev) = declare(cert);
            row.event = ev;
            emit(&mut trace, row, true);
            return Ok(finish(kind, k, trace, updates, ops, strat.stored_pairs()));
        }
        if (s.f - 1.0).abs() > 1e-8 && k > 0 {
            log::debug!("re-rescaling drifted f = {} at iteration {k}", s.f);
        }
        s.rescale_unit_f(p)?;

        let gamma = s.gamma(p, j)?;
        let bound = viol[j] + p.u()[j] - gamma;
        if s.l[j] < bound {
            row.l_cert_updated = true;
            if strat.tracks() {
                let (_, lh) = slab_multiplier(p, &s, j)?;
                ops.flops += 2 * n * n + 2 * n * m + m;
                strat.record(p, j, &lh, &mut ops)?;
            }
        }
        if vmax - gamma > TOL_STRICT {
            let cert = strat.certificate(p, j, &mut ops)?;
            let (kind, ev) = declare(cert);
            row.event = ev;
            emit(&mut trace, row, true);
            return Ok(finish(kind, k, trace, updates, ops, strat.stored_pairs()));
        }
        if k >= max_iter {
            emit(&mut trace, row, true);
            return Ok(finish(OutcomeKind::IterLimit, k, trace, updates, ops, strat.stored_pairs()));
        }

        match update_step(p, &s, j, cfg, k).map_err(|e| annotate(e, k))? {
            Step::Feasible(x) => {
                row.event = TraceEvent::Feasible;
                emit(&mut trace, row, true);
                return Ok(finish(OutcomeKind::Feasible(x), k, trace, updates, ops, strat.stored_pairs()));
            }
            Step::TypeQ(w) => {
                let check = if cfg.check_invariants { strat.lambda().cloned() } else { None };
                let cert = match resolve_type_q(p, &w, cfg.tol_f, check.as_ref()).map_err(|e| annotate(e, k))? {
                    TypeQResolution::BoundViolation { j } => strat.certificate(p, j, &mut ops)?,
                    TypeQResolution::Slab { k: kk, lambda_hat } => {
                        if strat.tracks() {
                            strat.record(p, kk, &lambda_hat, &mut ops)?;
                        }
                        strat.certificate(p, kk, &mut ops)?
                    }
                };
                let (kind, ev) = declare(cert);
                row.event = ev;
                emit(&mut trace, row, true);
                return Ok(finish(kind, k, trace, updates, ops, strat.stored_pairs()));
            }
            Step::Updated { shifted, after, diag } => {
                ops.rank_one_updates += 3;
                ops.flops += 3 * (4 * n * n + 2 * n * m);
                hooks.on_update(&UpdateContext { problem: p, before: &s, shifted: &shifted, after: &after, diag: &diag });
                updates.push(diag);
                s = after;
                k += 1;
                if s.maybe_refresh(p, cfg.refresh_every)? {
                    s.rescale_unit_f(p)?;
                    ops.refreshes += 1;
                    ops.flops += 2 * n * n * m + n * n * n;
                }
                emit(&mut trace, row, false);
                if cfg.check_invariants {
                    if let Some(lambda) = strat.lambda() {
                        let b = CertifiedBounds { l: s.l.clone(), lambda: lambda.clone() };
                        let rep = verify_certified_bounds(p, &b, 1e-8)?;
                        if !rep.pass {
                            return Err(Error::InvariantViolation(format!(
                                "bounds lost certification at iteration {k}: eq {:e}, min entry {:e}, slack {:e}",
                                rep.eq_residual, rep.min_entry, rep.min_slack
                            )));
                        }
                    }
                }
                hooks.on_iteration(p, &s, strat.lambda());
            }
        }
    }
}

fn annotate(e: Error, k: usize) -> Error {
    match e {
        Error::NumericalBreakdown(msg) => Error::NumericalBreakdown(format!("iteration {k}: {msg}")),
        Error::Precondition(msg) => Error::Precondition(format!("iteration {k}: {msg}")),
        other => other,
    }
}

pub fn run_oea(inst: &Instance, cfg: &SolverConfig) -> Result<Outcome> {
    run_oea_with_hooks(inst, cfg, &mut NoHooks)
}

pub fn run_oea_with_hooks(inst: &Instance, cfg: &SolverConfig, hooks: &mut dyn SolverHooks) -> Result<Outcome> {
    let mut strat = FullLambda(inst.bounds.lambda.clone());
    run_with_strategy(inst, cfg, &mut strat, hooks)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:e}")).unwrap_or_default()
}

/// Writes the trace as CSV; the side column is added when any row carries one.
pub fn write_trace_csv<W: Write>(w: W, trace: &[IterationTrace]) -> Result<()> {
    let with_side = trace.iter().any(|r| r.side.is_some());
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["iter", "f", "log_rel_volume", "phi", "j", "max_violation", "l_cert_updated", "event"];
    if with_side {
        header.push("side");
    }
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    wr.write_record(&header).map_err(csv_err)?;
    for r in trace {
        let event = match r.event {
            TraceEvent::None => "none",
            TraceEvent::Feasible => "feasible",
            TraceEvent::TypeL => "typeL",
            TraceEvent::Declared => "declared",
        };
        let mut rec = vec![
            r.iter.to_string(),
            format!("{:e}", r.f),
            fmt_opt(r.log_rel_volume),
            fmt_opt(r.phi),
            r.j.to_string(),
            format!("{:e}", r.max_violation),
            r.l_cert_updated.to_string(),
            event.to_string(),
        ];
        if with_side {
            rec.push(match r.side {
                Some(Side::P) => "P".into(),
                Some(Side::Alt) => "Alt".into(),
                None => String::new(),
            });
        }
        wr.write_record(&rec).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificates::verify_type_l;
    use crate::problem::BoxSystem;

    fn square() -> Instance {
        Instance::from_box(BoxSystem {
            a_hat: DMatrix::zeros(2, 0),
            u_hat: DVector::zeros(0),
            lo: DVector::from_element(2, -1.0),
            hi: DVector::from_element(2, 1.0),
        })
        .unwrap()
    }

    fn diagonal() -> Instance {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        Instance::from_box(BoxSystem {
            a_hat: DMatrix::from_column_slice(2, 1, &[h, h]),
            u_hat: DVector::from_vec(vec![-1.2]),
            lo: DVector::from_element(2, -1.0),
            hi: DVector::from_element(2, 1.0),
        })
        .unwrap()
    }

    #[test]
    fn bounds_formulas() {
        assert_eq!(feasible_box_iteration_bound(2, 4, 0, 2.0 * 2f64.sqrt(), 1.0), 13);
        assert_eq!(infeasible_iteration_bound(2, 0.5f64.sqrt(), 0.5), 0);
        let mi = default_max_iter(4, 2.0);
        assert!(mi > 100 && mi <= MAX_ITER_CAP);
    }

    #[test]
    fn square_is_feasible_immediately() {
        let out = run_oea(&square(), &SolverConfig::default()).unwrap();
        assert_eq!(out.iterations, 0);
        match out.kind {
            OutcomeKind::Feasible(x) => assert!(x.amax() < 1e-15),
            other => panic!("{other:?}"),
        }
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.trace[0].event, TraceEvent::Feasible);
    }

    #[test]
    fn diagonal_most_violated() {
        let inst = diagonal();
        let s = derive_state(&inst.problem, &inst.d0, &inst.bounds.l).unwrap();
        let (j, v) = most_violated(&s, &inst.problem);
        assert_eq!(j, 0);
        assert!((v - 0.7643).abs() < 1e-4);
        assert!((s.y[0] + 0.308088).abs() < 1e-6 && (s.y[1] + 0.308088).abs() < 1e-6);
    }

    #[test]
    fn diagonal_first_update_identity() {
        let inst = diagonal();
        let p = &inst.problem;
        let mut s = derive_state(p, &inst.d0, &inst.bounds.l).unwrap();
        s.rescale_unit_f(p).unwrap();
        // the shifted center is already feasible, so the procedure stops there
        match procedure_2(p, &s, &inst.bounds, 0, &SolverConfig::default()).unwrap() {
            UpdateOutcome::FeasiblePoint(x) => assert!(p.is_feasible(&x, 1e-12)),
            other => panic!("{other:?}"),
        }
        match update_parameters(p, &s, 0, &SolverConfig::default()).map(|(a, d)| UpdateOutcome::Updated(a, d)).unwrap() {
            UpdateOutcome::Updated(after, diag) => {
                assert!((diag.f_d2_l2 - 25.0 / 24.0).abs() < 1e-12);
                assert!((after.f - 1.0).abs() < 1e-15);
                assert!(diag.shift_residual.abs() < 1e-12);
                assert!(diag.alpha > 24.0 / 25.0);
                assert!(diag.d3_residual < 1e-12);
                assert!(diag.log_volume_after - diag.log_volume_before <= -1.0 / 12.0 + 1e-10);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn diagonal_solves() {
        let out = run_oea(&diagonal(), &SolverConfig::default()).unwrap();
        match &out.kind {
            OutcomeKind::Feasible(x) => assert!(diagonal().problem.is_feasible(x, 1e-9)),
            other => panic!("{other:?}"),
        }
        for w in out.trace.windows(2) {
            assert!(w[1].log_rel_volume.unwrap() - w[0].log_rel_volume.unwrap() <= -1.0 / 12.0 + 1e-10);
        }
    }

    #[test]
    fn unpadded_pair_certificate() {
        let inst = crate::generate::gen_instance(&crate::generate::GenSpec::infeasible_shifted(1, 1, 1.0, None, 0))
            .unwrap();
        let out = run_oea(&inst, &SolverConfig::default()).unwrap();
        assert_eq!(out.iterations, 0);
        match &out.kind {
            OutcomeKind::InfeasibleTypeL(c) => assert!(verify_type_l(&inst.problem, &c.lambda_bar, 1e-8).unwrap().pass),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn iteration_limit() {
        let cfg = SolverConfig { max_iter: Some(1), ..Default::default() };
        let out = run_oea(&diagonal(), &cfg).unwrap();
        assert!(matches!(out.kind, OutcomeKind::IterLimit | OutcomeKind::Feasible(_)));
        assert!(out.iterations <= 1);
    }

    #[test]
    fn trace_csv_header() {
        let out = run_oea(&diagonal(), &SolverConfig { tau_hint: Some(0.1), ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &out.trace).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,f,log_rel_volume,phi,j,max_violation,l_cert_updated,event\n"));
        assert_eq!(text.lines().count(), out.trace.len() + 1);
    }

    #[test]
    fn rejects_uncertified_bounds() {
        let mut inst = square();
        inst.bounds.l[0] = 5.0;
        assert!(matches!(run_oea(&inst, &SolverConfig::default()), Err(Error::InvariantViolation(_))));
    }
}
