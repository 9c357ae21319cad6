//! Seeded instance generators with oracle-computed ground truth.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{BoxSystem, CertifiedBounds, Instance, InstanceMeta, ProblemData};
use crate::tau::{estimate_tau_with, TauCaps};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenKind {
    FeasibleBox,
    InfeasibleShifted,
    RandomCone,
}

impl std::str::FromStr for GenKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feasible-box" => Ok(Self::FeasibleBox),
            "infeasible-shifted" => Ok(Self::InfeasibleShifted),
            "random-cone" => Ok(Self::RandomCone),
            other => Err(Error::BadSpec(format!("unknown generator kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub kind: GenKind,
    pub n: usize,
    /// General cuts (feasible-box, random-cone) or opposing pairs (infeasible-shifted).
    pub m_hat: usize,
    /// Width of the empty strip between each opposing pair.
    #[serde(default)]
    pub gap: Option<f64>,
    /// Half-width of the padding box; `None` means no box (1-D pairs only).
    #[serde(default)]
    pub pad: Option<f64>,
    pub seed: u64,
}

impl GenSpec {
    pub fn feasible_box(n: usize, m_hat: usize, seed: u64) -> Self {
        Self { kind: GenKind::FeasibleBox, n, m_hat, gap: None, pad: None, seed }
    }

    pub fn infeasible_shifted(n: usize, pairs: usize, gap: f64, pad: Option<f64>, seed: u64) -> Self {
        Self { kind: GenKind::InfeasibleShifted, n, m_hat: pairs, gap: Some(gap), pad, seed }
    }

    pub fn random_cone(n: usize, m_hat: usize, seed: u64) -> Self {
        Self { kind: GenKind::RandomCone, n, m_hat, gap: None, pad: None, seed }
    }
}

pub fn gen_instance(spec: &GenSpec) -> Result<Instance> {
    if spec.n == 0 {
        return Err(Error::BadSpec("n must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        GenKind::FeasibleBox => feasible_box(spec, &mut rng),
        GenKind::InfeasibleShifted => infeasible_shifted(spec, &mut rng),
        GenKind::RandomCone => random_cone(spec, &mut rng),
    }
}

fn unit_normal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let nrm = v.norm();
        if nrm > 1e-3 {
            return v / nrm;
        }
    }
}

fn random_box(rng: &mut ChaCha8Rng, n: usize) -> (DVector<f64>, DVector<f64>) {
    let lo = DVector::from_fn(n, |_, _| -rng.random_range(0.5..1.5));
    let hi = DVector::from_fn(n, |_, _| rng.random_range(0.5..1.5));
    (lo, hi)
}

fn box_extremes(a: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> (f64, f64) {
    let mut mn = 0.0;
    let mut mx = 0.0;
    for k in 0..a.len() {
        if a[k] >= 0.0 {
            mn += a[k] * lo[k];
            mx += a[k] * hi[k];
        } else {
            mn += a[k] * hi[k];
            mx += a[k] * lo[k];
        }
    }
    (mn, mx)
}

fn oracle_meta(p: &ProblemData) -> Result<Option<InstanceMeta>> {
    match estimate_tau_with(p, TauCaps::generator(), false) {
        Ok(t) => Ok(Some(InstanceMeta { tau: Some(t.tau), rho: None, feasible: Some(t.feasible) })),
        Err(Error::TooLarge(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn feasible_box(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let n = spec.n;
    let (lo, hi) = random_box(rng, n);
    // common interior point shared by all cuts, away from the box center
    let c = DVector::from_fn(n, |k, _| {
        let t = rng.random_range(0.1..0.3);
        if rng.random_bool(0.5) { lo[k] + (hi[k] - lo[k]) * t } else { hi[k] - (hi[k] - lo[k]) * t }
    });
    let mut a_hat = DMatrix::zeros(n, spec.m_hat);
    let mut u_hat = DVector::zeros(spec.m_hat);
    for i in 0..spec.m_hat {
        let a = unit_normal(rng, n);
        let ac = a.dot(&c);
        let (_, mx) = box_extremes(&a, &lo, &hi);
        let margin: f64 = rng.random_range(0.05..0.3);
        u_hat[i] = (ac + margin).min(ac + 0.5 * (mx - ac));
        a_hat.set_column(i, &a);
    }
    let bx = BoxSystem { a_hat, u_hat, lo, hi };
    let mut inst = Instance::from_box(bx)?;
    let meta = oracle_meta(&inst.problem)?.unwrap_or(InstanceMeta { feasible: Some(true), ..Default::default() });
    if meta.feasible == Some(false) {
        return Err(Error::AssumptionViolated("feasible-box generator produced an infeasible system".into()));
    }
    inst.meta = meta;
    Ok(inst)
}

fn infeasible_shifted(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let n = spec.n;
    let gap = spec.gap.ok_or_else(|| Error::BadSpec("infeasible-shifted needs a gap".into()))?;
    if !(gap > 0.0) {
        return Err(Error::BadSpec("gap must be positive".into()));
    }
    let pairs = spec.m_hat.max(1);
    match spec.pad {
        None => {
            if n != 1 || pairs != 1 {
                return Err(Error::BadSpec("an unpadded infeasible instance needs n = 1 and one pair".into()));
            }
            // x <= -g/2 and -x <= -g/2, each bounded below by the other at level g/2 >= -g
            let p = ProblemData::new(
                DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
                DVector::from_vec(vec![-0.5 * gap, -0.5 * gap]),
            )?;
            let b = CertifiedBounds {
                l: DVector::from_element(2, -gap),
                lambda: DMatrix::from_column_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            };
            let meta = oracle_meta(&p)?.unwrap_or_default();
            Ok(Instance::new(p, b).with_meta(meta))
        }
        Some(pad) => {
            if !(pad >= gap) {
                return Err(Error::BadSpec(format!("pad {pad} must be at least the gap {gap}")));
            }
            let lo = DVector::from_element(n, -pad);
            let hi = DVector::from_element(n, pad);
            let c = DVector::from_fn(n, |_, _| rng.random_range(-0.5 * pad..0.5 * pad));
            let mut a_hat = DMatrix::zeros(n, 2 * pairs);
            let mut u_hat = DVector::zeros(2 * pairs);
            for k in 0..pairs {
                let a = unit_normal(rng, n);
                let g = if k == 0 { gap } else { gap * rng.random_range(0.5..1.0) };
                let ac = a.dot(&c);
                a_hat.set_column(2 * k, &a);
                a_hat.set_column(2 * k + 1, &(-&a));
                u_hat[2 * k] = ac - 0.5 * g;
                u_hat[2 * k + 1] = -ac - 0.5 * g;
            }
            let bx = BoxSystem { a_hat, u_hat, lo, hi };
            let mut inst = Instance::from_box(bx)?;
            let mut meta = oracle_meta(&inst.problem)?.unwrap_or_default();
            if meta.feasible == Some(true) {
                return Err(Error::AssumptionViolated("shifted pairs left a feasible system".into()));
            }
            meta.feasible = Some(false);
            inst.meta = meta;
            Ok(inst)
        }
    }
}

fn random_cone(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let n = spec.n;
    let (lo, hi) = random_box(rng, n);
    let mut a_hat = DMatrix::zeros(n, spec.m_hat);
    let mut u_hat = DVector::zeros(spec.m_hat);
    for i in 0..spec.m_hat {
        let a = unit_normal(rng, n);
        let (mn, mx) = box_extremes(&a, &lo, &hi);
        let c = DVector::from_fn(n, |k, _| rng.random_range(lo[k]..hi[k]));
        let noise: f64 = 0.3 * rng.sample::<f64, _>(StandardNormal);
        let w = mx - mn;
        u_hat[i] = (a.dot(&c) + noise).clamp(mn + 1e-3 * w, mx - 1e-3 * w);
        a_hat.set_column(i, &a);
    }
    let bx = BoxSystem { a_hat, u_hat, lo, hi };
    let mut inst = Instance::from_box(bx)?;
    inst.meta = oracle_meta(&inst.problem)?.unwrap_or_default();
    Ok(inst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::verify_certified_bounds;

    #[test]
    fn feasible_box_square_like() {
        let inst = gen_instance(&GenSpec::feasible_box(2, 0, 7)).unwrap();
        assert_eq!(inst.problem.m(), 4);
        assert_eq!(inst.meta.feasible, Some(true));
        assert!(inst.meta.tau.unwrap() > 0.0);
    }

    #[test]
    fn unpadded_pair() {
        let inst = gen_instance(&GenSpec::infeasible_shifted(1, 1, 1.0, None, 0)).unwrap();
        assert_eq!(inst.problem.a().as_slice(), &[1.0, -1.0]);
        assert_eq!(inst.problem.u().as_slice(), &[-0.5, -0.5]);
        assert!((inst.meta.tau.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(inst.meta.feasible, Some(false));
        assert!(verify_certified_bounds(&inst.problem, &inst.bounds, 0.0).unwrap().pass);
    }

    #[test]
    fn deterministic() {
        for spec in [
            GenSpec::feasible_box(3, 2, 11),
            GenSpec::infeasible_shifted(2, 2, 0.7, Some(2.0), 5),
            GenSpec::random_cone(2, 3, 9),
        ] {
            let a = gen_instance(&spec).unwrap();
            let b = gen_instance(&spec).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn padded_pairs_are_infeasible() {
        for seed in 0..5 {
            let inst = gen_instance(&GenSpec::infeasible_shifted(2, 1, 0.8, Some(2.0), seed)).unwrap();
            assert_eq!(inst.meta.feasible, Some(false));
            assert!((inst.meta.tau.unwrap() - 0.4).abs() < 1e-9);
            assert!(verify_certified_bounds(&inst.problem, &inst.bounds, 1e-12).unwrap().pass);
        }
    }

    #[test]
    fn bad_specs() {
        assert!(matches!(gen_instance(&GenSpec::feasible_box(0, 1, 0)), Err(Error::BadSpec(_))));
        assert!(matches!(gen_instance(&GenSpec::infeasible_shifted(2, 1, 1.0, None, 0)), Err(Error::BadSpec(_))));
        assert!(matches!(gen_instance(&GenSpec::infeasible_shifted(1, 1, -1.0, None, 0)), Err(Error::BadSpec(_))));
    }
}
