//! Seeded benchmark suites, per-run bound checks and report tables.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::certificates::verify_type_l;
use crate::error::{Error, Result};
use crate::generate::{gen_instance, GenKind, GenSpec};
use crate::oea::{
    feasible_box_iteration_bound, infeasible_iteration_bound, run_oea, Outcome, OutcomeKind, Side, SolverConfig,
};
use crate::problem::Instance;
use crate::seap::{central_cut_log_volume_change, run_seap, run_std_ellipsoid, StdSystem};
use crate::variants::{run_oea_mm, run_oea_no_alt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Oea,
    OeaNoAlt,
    OeaMm,
    Seap,
    StdP,
    StdAlt,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] =
        [Algorithm::Oea, Algorithm::OeaNoAlt, Algorithm::OeaMm, Algorithm::Seap, Algorithm::StdP, Algorithm::StdAlt];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Oea => "oea",
            Algorithm::OeaNoAlt => "oea-no-alt",
            Algorithm::OeaMm => "oea-mm",
            Algorithm::Seap => "seap",
            Algorithm::StdP => "std-p",
            Algorithm::StdAlt => "std-alt",
        }
    }

    fn is_oea(self) -> bool {
        matches!(self, Algorithm::Oea | Algorithm::OeaNoAlt | Algorithm::OeaMm)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown algorithm {s:?}")))
    }
}

pub fn run_algorithm(alg: Algorithm, inst: &Instance, cfg: &SolverConfig) -> Result<Outcome> {
    match alg {
        Algorithm::Oea => run_oea(inst, cfg),
        Algorithm::OeaNoAlt => run_oea_no_alt(inst, cfg),
        Algorithm::OeaMm => run_oea_mm(inst, cfg),
        Algorithm::Seap => run_seap(inst, cfg),
        Algorithm::StdP => run_std_ellipsoid(StdSystem::P(inst), cfg),
        Algorithm::StdAlt => run_std_ellipsoid(StdSystem::AltBall(inst), cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Feasible,
    Infeasible,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feasible" => Ok(Suite::Feasible),
            "infeasible" => Ok(Suite::Infeasible),
            other => Err(Error::InvalidInput(format!("unknown suite {other:?}"))),
        }
    }
}

/// Box instances with `n` in 2..=5 and 0..=4 general cuts.
pub fn feasible_suite(count: usize, seed: u64) -> Vec<GenSpec> {
    (0..count).map(|i| GenSpec::feasible_box(2 + i % 4, (i / 4) % 5, seed.wrapping_add(i as u64))).collect()
}

/// Shifted opposing pairs with `τ` spread over `[0.05, 1]`; the first instance is the unboxed 1-D pair.
pub fn infeasible_suite(count: usize, seed: u64) -> Vec<GenSpec> {
    (0..count)
        .map(|i| {
            let s = seed.wrapping_add(i as u64);
            let frac = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.0 };
            let tau = 0.05 + 0.95 * frac;
            let gap = 2.0 * tau;
            if i == 0 {
                return GenSpec::infeasible_shifted(1, 1, gap, None, s);
            }
            let n = 1 + i % 4;
            let pairs = 1 + (i / 4) % 3;
            GenSpec::infeasible_shifted(n, pairs, gap, Some(gap.max(1.0)), s)
        })
        .collect()
}

pub fn suite_specs(suite: Suite, count: usize, seed: u64) -> Vec<GenSpec> {
    match suite {
        Suite::Feasible => feasible_suite(count, seed),
        Suite::Infeasible => infeasible_suite(count, seed),
    }
}

/// Worst-case iteration bound for the oblivious method, when `τ` is known.
pub fn theoretical_bound(inst: &Instance) -> Option<usize> {
    let tau = inst.meta.tau?;
    let m = inst.problem.m();
    match inst.meta.feasible? {
        true => {
            let bx = inst.source_box.as_ref()?;
            Some(feasible_box_iteration_bound(bx.n(), m, bx.m_hat(), bx.diameter(), tau))
        }
        false => Some(infeasible_iteration_bound(m, (inst.problem.u() - &inst.bounds.l).norm(), tau)),
    }
}

/// Per-iteration contraction checks on a finished run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ContractionCheck {
    pub volume_checked: usize,
    pub volume_violations: usize,
    pub phi_checked: usize,
    pub phi_violations: usize,
}

/// Volume ratios of every update against `e^{-1/(2(m+1))}`, and potential ratios on infeasible
/// instances with known `τ`; classical central-cut decrease for the standard method's sides.
pub fn contraction_check(inst: &Instance, out: &Outcome) -> ContractionCheck {
    let mut c = ContractionCheck::default();
    let m = inst.problem.m() as f64;
    let limit = (-1.0 / (2.0 * (m + 1.0))).exp() + 1e-10;
    for d in &out.updates {
        c.volume_checked += 1;
        if (d.log_volume_after - d.log_volume_before).exp() > limit {
            c.volume_violations += 1;
        }
        if let (Some(tau), Some(false), Some(b), Some(a)) =
            (inst.meta.tau, inst.meta.feasible, d.log_phi_before, d.log_phi_after)
        {
            if d.sqrt_f_over_dj >= tau {
                c.phi_checked += 1;
                if (a - b).exp() > limit {
                    c.phi_violations += 1;
                }
            }
        }
    }
    for side in [Side::P, Side::Alt] {
        let q = match side {
            Side::P => inst.problem.n(),
            Side::Alt => inst.problem.m() - inst.problem.n(),
        };
        let rows: Vec<_> = out.trace.iter().filter(|r| r.side == Some(side)).collect();
        for w in rows.windows(2) {
            if w[1].iter != w[0].iter + 1 {
                continue;
            }
            if let (Some(a), Some(b)) = (w[0].log_rel_volume, w[1].log_rel_volume) {
                c.volume_checked += 1;
                let change = b - a;
                if (change - central_cut_log_volume_change(q)).abs() > 1e-8
                    || change > -1.0 / (2.0 * (q as f64 + 1.0)) + 1e-10
                {
                    c.volume_violations += 1;
                }
            }
        }
    }
    c
}

/// Whether the outcome is correct for the instance and passes independent verification.
pub fn outcome_verified(inst: &Instance, out: &Outcome, tol_feas: f64) -> bool {
    match (&out.kind, inst.meta.feasible) {
        (OutcomeKind::Feasible(x), f) => f != Some(false) && inst.problem.is_feasible(x, tol_feas),
        (OutcomeKind::InfeasibleTypeL(c), f) => {
            f != Some(true) && verify_type_l(&inst.problem, &c.lambda_bar, 1e-8).map_or(false, |r| r.pass)
        }
        (OutcomeKind::InfeasibleDeclared, f) => f != Some(true),
        (OutcomeKind::IterLimit, _) => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub index: usize,
    pub algorithm: Algorithm,
    pub kind: GenKind,
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub tau: Option<f64>,
    pub outcome: String,
    pub verified: bool,
    pub iterations: usize,
    pub p_iterations: Option<usize>,
    pub alt_iterations: Option<usize>,
    pub winner: Option<String>,
    pub wall_ms: f64,
    pub rank_one_updates: u64,
    pub flops: u64,
    pub flops_per_iter: f64,
    pub bound: Option<usize>,
    pub bound_satisfied: Option<bool>,
    pub volume_violations: usize,
    pub phi_checked: usize,
    pub phi_violations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub suite: Suite,
    pub count: usize,
    pub seed: u64,
    pub algorithms: Vec<Algorithm>,
    pub workers: usize,
    pub solver: SolverConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            suite: Suite::Feasible,
            count: 20,
            seed: 0,
            algorithms: vec![Algorithm::Oea],
            workers: 1,
            solver: SolverConfig::default(),
        }
    }
}

fn bench_cell(index: usize, spec: &GenSpec, alg: Algorithm, base: &SolverConfig) -> BenchRow {
    let mut row = BenchRow {
        index,
        algorithm: alg,
        kind: spec.kind,
        seed: spec.seed,
        n: spec.n,
        m: 0,
        tau: None,
        outcome: "error".into(),
        verified: false,
        iterations: 0,
        p_iterations: None,
        alt_iterations: None,
        winner: None,
        wall_ms: 0.0,
        rank_one_updates: 0,
        flops: 0,
        flops_per_iter: 0.0,
        bound: None,
        bound_satisfied: None,
        volume_violations: 0,
        phi_checked: 0,
        phi_violations: 0,
        error: None,
    };
    let inst = match gen_instance(spec) {
        Ok(i) => i,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    row.m = inst.problem.m();
    row.tau = inst.meta.tau;
    let cfg = SolverConfig { tau_hint: base.tau_hint.or(inst.meta.tau), ..base.clone() };
    let t0 = Instant::now();
    let res = run_algorithm(alg, &inst, &cfg);
    row.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    let out = match res {
        Ok(o) => o,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    row.outcome = out.kind.label().into();
    row.verified = outcome_verified(&inst, &out, cfg.tol_feas);
    row.iterations = out.iterations;
    if let Some((p, a)) = out.side_iterations {
        row.p_iterations = Some(p);
        row.alt_iterations = Some(a);
    }
    row.winner = out.side.map(|s| format!("{s:?}"));
    row.rank_one_updates = out.ops.rank_one_updates;
    row.flops = out.ops.flops;
    row.flops_per_iter = out.ops.flops as f64 / out.iterations.max(1) as f64;
    if alg.is_oea() {
        row.bound = theoretical_bound(&inst);
        row.bound_satisfied = row.bound.map(|b| out.iterations <= b);
    }
    let c = contraction_check(&inst, &out);
    row.volume_violations = c.volume_violations;
    row.phi_checked = c.phi_checked;
    row.phi_violations = c.phi_violations;
    row
}

/// Runs every (instance, algorithm) cell; rows are ordered by instance, then algorithm.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let specs = suite_specs(cfg.suite, cfg.count, cfg.seed);
    let cells: Vec<_> = specs
        .iter()
        .enumerate()
        .flat_map(|(i, s)| cfg.algorithms.iter().map(move |&a| (i, s, a)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("worker pool: {e}")))?;
    let mut rows: Vec<BenchRow> =
        pool.install(|| cells.par_iter().map(|&(i, s, a)| bench_cell(i, s, a, &cfg.solver)).collect());
    rows.sort_by_key(|r| (r.index, r.algorithm));
    Ok(rows)
}

pub fn write_bench_csv<W: std::io::Write>(w: W, rows: &[BenchRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    for r in rows {
        wr.serialize(r).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

fn opt<T: std::fmt::Display>(x: Option<T>) -> String {
    x.map_or_else(|| "-".into(), |v| v.to_string())
}

/// Markdown tables: per-algorithm totals and the per-instance iteration comparison.
pub fn summary_table(rows: &[BenchRow]) -> String {
    let mut algs: Vec<Algorithm> = rows.iter().map(|r| r.algorithm).collect();
    algs.sort();
    algs.dedup();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "| algorithm | runs | verified | errors | mean iters | max iters | bound ok | volume viol. | phi viol. |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|");
    for &a in &algs {
        let rs: Vec<_> = rows.iter().filter(|r| r.algorithm == a).collect();
        let ok = rs.iter().filter(|r| r.error.is_none()).count();
        let mean = rs.iter().map(|r| r.iterations as f64).sum::<f64>() / rs.len().max(1) as f64;
        let max = rs.iter().map(|r| r.iterations).max().unwrap_or(0);
        let bounded = rs.iter().filter(|r| r.bound_satisfied.is_some()).count();
        let bound_ok = rs.iter().filter(|r| r.bound_satisfied == Some(true)).count();
        let _ = writeln!(
            s,
            "| {a} | {} | {} | {} | {mean:.1} | {max} | {} | {} | {} |",
            rs.len(),
            rs.iter().filter(|r| r.verified).count(),
            rs.len() - ok,
            if bounded > 0 { format!("{bound_ok}/{bounded}") } else { "-".into() },
            rs.iter().map(|r| r.volume_violations).sum::<usize>(),
            rs.iter().map(|r| r.phi_violations).sum::<usize>(),
        );
    }
    s.push('\n');
    let _ = write!(s, "| instance | n | m | tau |");
    for a in &algs {
        let _ = write!(s, " {a} |");
    }
    s.push('\n');
    let _ = write!(s, "|---|---|---|---|");
    for _ in &algs {
        s.push_str("---|");
    }
    s.push('\n');
    let mut idx: Vec<usize> = rows.iter().map(|r| r.index).collect();
    idx.dedup();
    for i in idx {
        let rs: Vec<_> = rows.iter().filter(|r| r.index == i).collect();
        let first = rs[0];
        let _ = write!(s, "| {i} | {} | {} | {} |", first.n, first.m, opt(first.tau.map(|t| format!("{t:.3}"))));
        for &a in &algs {
            let cell = rs.iter().find(|r| r.algorithm == a).map_or_else(
                || "-".into(),
                |r| match (&r.error, r.p_iterations, r.alt_iterations) {
                    (Some(_), _, _) => "error".into(),
                    (None, Some(p), Some(q)) if a == Algorithm::Seap => format!("{} ({p}+{q})", r.iterations),
                    _ => r.iterations.to_string(),
                },
            );
            let _ = write!(s, " {cell} |");
        }
        s.push('\n');
    }
    s
}
