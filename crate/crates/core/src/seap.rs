//! Classical central-cut ellipsoid method on the primal system and on the nullspace form of the
//! alternative system, and the alternating combination of the two.

use nalgebra::{DMatrix, DVector};

use crate::certificates::{TypeLCertificate, TOL_STRICT};
use crate::error::{Error, Result};
use crate::oea::{IterationTrace, OpCounts, Outcome, OutcomeKind, Side, SolverConfig, TraceEvent, TAU_FLOOR};
use crate::problem::{numerical_rank, Instance, ProblemData};

/// A side stops once `cond(G)` exceeds this; beyond it `ln det G` is no longer accurate to 1e-9.
pub const MAX_SHAPE_CONDITION: f64 = 1e7;

/// Orthonormal basis of `{λ : Aλ = 0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NullspaceBasis {
    pub z: DMatrix<f64>,
}

impl NullspaceBasis {
    pub fn dim(&self) -> usize {
        self.z.ncols()
    }
}

/// Householder QR of `[A^T | 0]`; the trailing `m - n` columns of the full `Q` span the nullspace.
pub fn orthonormal_nullspace(p: &ProblemData) -> Result<NullspaceBasis> {
    let (n, m) = (p.n(), p.m());
    let rank = numerical_rank(p.a());
    if rank < n {
        return Err(Error::RankDeficient { rank, n });
    }
    let mut sq = DMatrix::zeros(m, m);
    sq.view_mut((0, 0), (m, n)).copy_from(&p.a().transpose());
    let q = sq.qr().q();
    let mut z = q.columns(n, m - n).clone_owned();
    for mut col in z.column_iter_mut() {
        if let Some(first) = col.iter().copied().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
    Ok(NullspaceBasis { z })
}

/// `{x : (x - c)^T G^{-1} (x - c) <= 1}` with `G = shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct StdEllipsoidState {
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    pub log_det: f64,
}

impl StdEllipsoidState {
    pub fn ball(center: DVector<f64>, radius: f64) -> Self {
        let q = center.len();
        Self { log_det: 2.0 * q as f64 * radius.ln(), shape: DMatrix::identity(q, q) * (radius * radius), center }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn condition(&self) -> f64 {
        let ev = self.shape.clone().symmetric_eigenvalues();
        ev.max() / ev.min()
    }

    /// Central cut keeping `{x : a^T x <= a^T c}`.
    pub fn cut(&mut self, a: &DVector<f64>) -> Result<()> {
        let q = self.dim();
        let ga = &self.shape * a;
        let aga = a.dot(&ga);
        if !(aga > 0.0) || !aga.is_finite() {
            return Err(Error::NumericalBreakdown(format!("cut direction has a^T G a = {aga:e}")));
        }
        let g = ga / aga.sqrt();
        if q == 1 {
            self.center -= &g * 0.5;
            self.shape *= 0.25;
        } else {
            let qf = q as f64;
            self.center -= &g / (qf + 1.0);
            let mut s = &self.shape - (&g * g.transpose()) * (2.0 / (qf + 1.0));
            s *= qf * qf / (qf * qf - 1.0);
            self.shape = (&s + s.transpose()) * 0.5;
        }
        let chol = self
            .shape
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NumericalBreakdown("ellipsoid shape lost positive definiteness".into()))?;
        self.log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Ok(())
    }
}

/// Which system the classical method is applied to.
#[derive(Debug, Clone, Copy)]
pub enum StdSystem<'a> {
    P(&'a Instance),
    /// Nullspace coordinates of the alternative system intersected with the unit ball.
    AltBall(&'a Instance),
}

enum StepResult {
    Continue,
    Feasible(DVector<f64>),
    Certificate(TypeLCertificate),
    Exhausted,
}

/// One classical ellipsoid run that can be advanced a single iteration at a time.
struct Stepper<'a> {
    p: &'a ProblemData,
    side: Side,
    /// Cut normals (rows of the constraint system in the working space) and right-hand sides.
    normals: DMatrix<f64>,
    rhs: DVector<f64>,
    z: Option<DMatrix<f64>>,
    state: StdEllipsoidState,
    log_det0: f64,
    log_det_floor: f64,
    iter: usize,
    max_iter: usize,
    tol: f64,
    trace_every: usize,
    trace: Vec<IterationTrace>,
    ops: OpCounts,
}

impl<'a> Stepper<'a> {
    fn primal(inst: &'a Instance, cfg: &SolverConfig) -> Result<Self> {
        let p = &inst.problem;
        let n = p.n();
        let l = &inst.bounds.l;
        let u = p.u();
        // the region {x : ℓ <= A^T x <= u} lies in ‖A^T(x - y)‖² <= ‖v‖² - ‖t‖² around the least-squares center
        let r = (u + l) * 0.5;
        let v = (u - l) * 0.5;
        let aat = p.a() * p.a().transpose();
        let chol = aat.clone().cholesky().ok_or(Error::SingularShape)?;
        let y = chol.solve(&(p.a() * &r));
        let t = p.a().transpose() * &y - &r;
        let f = v.norm_squared() - t.norm_squared();
        let lmin = aat.symmetric_eigenvalues().min();
        let radius = if f > 0.0 { (f / lmin).sqrt().max(v.norm()) } else { v.norm() }.max(1e-12);
        let q = n;
        let state = StdEllipsoidState::ball(y, radius);
        let tau = cfg.tau_hint.unwrap_or(TAU_FLOOR);
        Ok(Self {
            p,
            side: Side::P,
            normals: p.a().transpose(),
            rhs: u.clone(),
            z: None,
            log_det0: state.log_det,
            log_det_floor: 2.0 * q as f64 * tau.ln(),
            state,
            iter: 0,
            max_iter: cfg.resolved_max_iter(p, l),
            tol: cfg.tol_feas,
            trace_every: cfg.trace_every.max(1),
            trace: Vec::new(),
            ops: OpCounts::default(),
        })
    }

    fn alt(inst: &'a Instance, cfg: &SolverConfig) -> Result<Self> {
        let p = &inst.problem;
        let basis = orthonormal_nullspace(p)?;
        let z = basis.z;
        let (m, q) = (p.m(), z.ncols());
        if q == 0 {
            return Err(Error::InvalidInput("nullspace is trivial".into()));
        }
        // rows: -Z μ <= 0, u^T Z μ <= -margin
        let mut normals = DMatrix::zeros(m + 1, q);
        normals.view_mut((0, 0), (m, q)).copy_from(&(-&z));
        normals.row_mut(m).copy_from(&(p.u().transpose() * &z));
        let mut rhs = DVector::zeros(m + 1);
        rhs[m] = -2.0 * TOL_STRICT;
        let state = StdEllipsoidState::ball(DVector::zeros(q), 1.0);
        let tau = cfg.tau_hint.unwrap_or(TAU_FLOOR);
        Ok(Self {
            p,
            side: Side::Alt,
            normals,
            rhs,
            z: Some(z),
            log_det0: state.log_det,
            log_det_floor: 2.0 * q as f64 * tau.ln(),
            state,
            iter: 0,
            max_iter: cfg.resolved_max_iter(p, &inst.bounds.l),
            tol: 0.0,
            trace_every: cfg.trace_every.max(1),
            trace: Vec::new(),
            ops: OpCounts::default(),
        })
    }

    /// Most violated normalized row; the unit-ball row is index `rows`.
    fn most_violated(&self) -> (usize, f64, DVector<f64>) {
        let c = &self.state.center;
        let mut best = (usize::MAX, f64::NEG_INFINITY, DVector::zeros(0));
        for i in 0..self.normals.nrows() {
            let a = self.normals.row(i).transpose();
            let nrm = a.norm();
            if nrm < 1e-14 {
                continue;
            }
            let v = (a.dot(c) - self.rhs[i]) / nrm;
            if v > best.1 {
                best = (i, v, a);
            }
        }
        if self.z.is_some() {
            let cn = c.norm();
            if cn - 1.0 > best.1 && cn > 0.0 {
                best = (self.normals.nrows(), cn - 1.0, c / cn);
            }
        }
        best
    }

    fn step(&mut self) -> Result<StepResult> {
        let (q, rows) = (self.dim() as u64, self.normals.nrows() as u64);
        let (j, viol, a) = self.most_violated();
        self.ops.flops += 2 * q * rows;
        let mut row = IterationTrace {
            iter: self.iter,
            f: 1.0,
            log_rel_volume: Some(0.5 * (self.state.log_det - self.log_det0)),
            phi: None,
            j,
            max_violation: viol,
            l_cert_updated: false,
            event: TraceEvent::None,
            side: Some(self.side),
        };
        if viol <= self.tol {
            let res = match &self.z {
                None => {
                    row.event = TraceEvent::Feasible;
                    StepResult::Feasible(self.state.center.clone())
                }
                Some(z) => {
                    row.event = TraceEvent::TypeL;
                    StepResult::Certificate(TypeLCertificate::new(self.p, z * &self.state.center)?)
                }
            };
            self.trace.push(row);
            return Ok(res);
        }
        if self.iter >= self.max_iter
            || self.state.log_det < self.log_det_floor
            || !(self.state.condition() <= MAX_SHAPE_CONDITION)
        {
            self.trace.push(row);
            return Ok(StepResult::Exhausted);
        }
        self.state.cut(&a)?;
        self.ops.rank_one_updates += 1;
        self.ops.flops += 4 * q * q + q * q * q / 3;
        if self.iter % self.trace_every == 0 {
            self.trace.push(row);
        }
        self.iter += 1;
        Ok(StepResult::Continue)
    }

    fn dim(&self) -> usize {
        self.state.dim()
    }

    fn into_outcome(self, kind: OutcomeKind) -> Outcome {
        let side = self.side;
        let iters = self.iter;
        Outcome {
            kind,
            iterations: iters,
            trace: self.trace,
            updates: Vec::new(),
            ops: self.ops,
            side: Some(side),
            side_iterations: Some(if side == Side::P { (iters, 0) } else { (0, iters) }),
            stored_pairs: None,
        }
    }
}

fn finished(r: StepResult) -> Option<OutcomeKind> {
    match r {
        StepResult::Continue => None,
        StepResult::Feasible(x) => Some(OutcomeKind::Feasible(x)),
        StepResult::Certificate(c) => Some(OutcomeKind::InfeasibleTypeL(c)),
        StepResult::Exhausted => Some(OutcomeKind::IterLimit),
    }
}

/// Runs the classical method on one system until success, the iteration limit, the volume
/// dropping below that of a ball of radius `tau_hint` (or the floor), or a degenerate shape.
pub fn run_std_ellipsoid(system: StdSystem<'_>, cfg: &SolverConfig) -> Result<Outcome> {
    cfg.validate()?;
    let mut st = match system {
        StdSystem::P(inst) => Stepper::primal(inst, cfg)?,
        StdSystem::AltBall(inst) => Stepper::alt(inst, cfg)?,
    };
    loop {
        if let Some(kind) = finished(st.step()?) {
            return Ok(st.into_outcome(kind));
        }
    }
}

/// Alternates single iterations on the primal and alternative systems until either succeeds.
pub fn run_seap(inst: &Instance, cfg: &SolverConfig) -> Result<Outcome> {
    cfg.validate()?;
    let mut sides = [Some(Stepper::primal(inst, cfg)?), Some(Stepper::alt(inst, cfg)?)];
    let mut done = [false, false];
    let mut trace = Vec::new();
    let mut ops = OpCounts::default();
    let mut iters = [0usize; 2];
    let mut winner = None;
    while winner.is_none() && !(done[0] && done[1]) {
        for k in 0..2 {
            if done[k] {
                continue;
            }
            let st = sides[k].as_mut().expect("active side");
            let res = match st.step() {
                Ok(r) => r,
                Err(Error::NumericalBreakdown(msg)) => {
                    log::warn!("{:?} side stopped: {msg}", st.side);
                    StepResult::Exhausted
                }
                Err(e) => return Err(e),
            };
            iters[k] = st.iter;
            match finished(res) {
                None => {}
                Some(OutcomeKind::IterLimit) => done[k] = true,
                Some(kind) => {
                    winner = Some((k, kind));
                    break;
                }
            }
        }
    }
    for st in sides.iter_mut().flatten() {
        trace.append(&mut st.trace);
        ops.rank_one_updates += st.ops.rank_one_updates;
        ops.flops += st.ops.flops;
    }
    trace.sort_by_key(|r| (r.iter, r.side != Some(Side::P)));
    let (kind, side) = match winner {
        Some((k, kind)) => (kind, Some(if k == 0 { Side::P } else { Side::Alt })),
        None => (OutcomeKind::IterLimit, None),
    };
    Ok(Outcome {
        kind,
        iterations: iters[0] + iters[1],
        trace,
        updates: Vec::new(),
        ops,
        side,
        side_iterations: Some((iters[0], iters[1])),
        stored_pairs: None,
    })
}

/// Exact per-iteration change of `ln vol` for a central cut in dimension `q`.
pub fn central_cut_log_volume_change(q: usize) -> f64 {
    if q == 1 {
        return -std::f64::consts::LN_2;
    }
    let qf = q as f64;
    0.5 * qf * (qf * qf / (qf * qf - 1.0)).ln() + 0.5 * ((qf - 1.0) / (qf + 1.0)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificates::verify_type_l;
    use crate::generate::{gen_instance, GenSpec};
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

    fn pair() -> Instance {
        gen_instance(&GenSpec::infeasible_shifted(1, 1, 1.0, None, 0)).unwrap()
    }

    #[test]
    fn nullspace_of_pair() {
        let b = orthonormal_nullspace(&pair().problem).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((b.z[(0, 0)] - h).abs() < 1e-15 && (b.z[(1, 0)] - h).abs() < 1e-15);
    }

    #[test]
    fn nullspace_of_square() {
        let inst = square();
        let b = orthonormal_nullspace(&inst.problem).unwrap();
        assert_eq!(b.dim(), 2);
        assert!((inst.problem.a() * &b.z).amax() < 1e-10);
        assert!((b.z.transpose() * &b.z - DMatrix::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn alt_ball_on_pair() {
        let inst = pair();
        let out = run_std_ellipsoid(StdSystem::AltBall(&inst), &SolverConfig::default()).unwrap();
        match &out.kind {
            OutcomeKind::InfeasibleTypeL(c) => {
                assert!(verify_type_l(&inst.problem, &c.lambda_bar, 1e-8).unwrap().pass);
                assert!((c.lambda_bar[0] - c.lambda_bar[1]).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn primal_square_at_origin() {
        let out = run_std_ellipsoid(StdSystem::P(&square()), &SolverConfig::default()).unwrap();
        assert_eq!(out.iterations, 0);
        match out.kind {
            OutcomeKind::Feasible(x) => assert!(x.amax() < 1e-15),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cut_volume_identity() {
        for q in 1..6 {
            let mut s = StdEllipsoidState::ball(DVector::zeros(q), 2.0);
            let a = DVector::from_fn(q, |i, _| (i as f64 + 1.0).sin());
            for _ in 0..5 {
                let before = s.log_det;
                s.cut(&a).unwrap();
                let change = 0.5 * (s.log_det - before);
                assert!((change - central_cut_log_volume_change(q)).abs() < 1e-10);
                assert!(change <= -1.0 / (2.0 * (q as f64 + 1.0)) + 1e-10);
            }
        }
    }

    #[test]
    fn seap_sides() {
        let out = run_seap(&square(), &SolverConfig::default()).unwrap();
        assert_eq!(out.side, Some(Side::P));
        assert_eq!(out.side_iterations, Some((0, 0)));
        let inst = pair();
        let out = run_seap(&inst, &SolverConfig::default()).unwrap();
        assert_eq!(out.side, Some(Side::Alt));
        match &out.kind {
            OutcomeKind::InfeasibleTypeL(c) => assert!(verify_type_l(&inst.problem, &c.lambda_bar, 1e-8).unwrap().pass),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seap_padded_infeasible() {
        for seed in 0..4 {
            let inst = gen_instance(&GenSpec::infeasible_shifted(2, 2, 0.4, Some(1.0), seed)).unwrap();
            let out = run_seap(&inst, &SolverConfig::default()).unwrap();
            assert!(matches!(out.kind, OutcomeKind::InfeasibleTypeL(_)), "seed {seed}: {:?}", out.kind);
        }
    }
}
