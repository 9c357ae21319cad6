//! Variants that skip or defer maintenance of the certificate matrix.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::certificates::{lift, TypeLCertificate};
use crate::error::{Error, Result};
use crate::oea::{run_with_strategy, CertStrategy, NoHooks, NoLambda, OpCounts, Outcome, SolverConfig, SolverHooks};
use crate::problem::{Instance, ProblemData};

/// Initial certificate matrix plus the ordered `(λ̂, j)` pairs of every column replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct CertIndexSeq {
    pub initial_lambda: DMatrix<f64>,
    pub pairs: Vec<(DVector<f64>, usize)>,
}

impl CertIndexSeq {
    pub fn new(initial_lambda: DMatrix<f64>) -> Self {
        Self { initial_lambda, pairs: Vec::new() }
    }

    pub fn m(&self) -> usize {
        self.initial_lambda.nrows()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `Λ⁽ᵏ⁾ e_target + e_target` by backward substitution; also returns a flop estimate.
pub fn backsolve(seq: &CertIndexSeq, target: usize) -> (DVector<f64>, u64) {
    let m = seq.m();
    let mut w = DVector::zeros(m);
    w[target] = 1.0;
    let mut z = w.clone();
    let mut flops = 0u64;
    for (lh, j) in seq.pairs.iter().rev() {
        let c = w[*j];
        if c == 0.0 {
            continue;
        }
        w[*j] = 0.0;
        for i in 0..m {
            let x = lh[i];
            if x < 0.0 {
                w[i] -= x * c;
            } else if x > 0.0 {
                z[i] += x * c;
            }
        }
        flops += 2 * m as u64;
    }
    flops += 2 * (m * m) as u64;
    (&seq.initial_lambda * w + z, flops)
}

/// Type-L certificate for the column replaced last.
pub fn backsolve_type_l(p: &ProblemData, seq: &CertIndexSeq) -> Result<TypeLCertificate> {
    let (_, j) = seq.pairs.last().ok_or(Error::EmptySequence)?;
    TypeLCertificate::new(p, backsolve(seq, *j).0)
}

/// `Λ⁽ᵏ⁾` by replaying every column replacement densely.
pub fn lambda_by_recursion(seq: &CertIndexSeq) -> DMatrix<f64> {
    let mut lambda = seq.initial_lambda.clone();
    for (lh, j) in &seq.pairs {
        let col = lift(&lambda, lh);
        lambda.set_column(*j, &col);
    }
    lambda
}

struct Deferred {
    seq: CertIndexSeq,
    cap: usize,
    degraded: bool,
}

impl CertStrategy for Deferred {
    fn tracks(&self) -> bool {
        !self.degraded
    }

    fn record(&mut self, _p: &ProblemData, j: usize, lambda_hat: &DVector<f64>, _ops: &mut OpCounts) -> Result<()> {
        if self.degraded {
            return Ok(());
        }
        if self.seq.len() >= self.cap {
            log::warn!("stored pair cap {} reached; continuing without certificates", self.cap);
            self.degraded = true;
            return Ok(());
        }
        self.seq.pairs.push((lambda_hat.clone(), j));
        Ok(())
    }

    fn certificate(&mut self, p: &ProblemData, j: usize, ops: &mut OpCounts) -> Result<Option<TypeLCertificate>> {
        if self.degraded {
            return Ok(None);
        }
        let (lb, flops) = backsolve(&self.seq, j);
        ops.flops += flops;
        TypeLCertificate::new(p, lb).map(Some)
    }

    fn lambda(&self) -> Option<&DMatrix<f64>> {
        None
    }

    fn stored_pairs(&self) -> Option<usize> {
        Some(self.seq.len())
    }
}

/// Declares infeasibility without building certificates.
pub fn run_oea_no_alt(inst: &Instance, cfg: &SolverConfig) -> Result<Outcome> {
    run_oea_no_alt_with_hooks(inst, cfg, &mut NoHooks)
}

pub fn run_oea_no_alt_with_hooks(inst: &Instance, cfg: &SolverConfig, hooks: &mut dyn SolverHooks) -> Result<Outcome> {
    run_with_strategy(inst, cfg, &mut NoLambda, hooks)
}

/// Stores `(λ̂, j)` pairs and reconstructs the certificate only when infeasibility is detected.
pub fn run_oea_mm(inst: &Instance, cfg: &SolverConfig) -> Result<Outcome> {
    run_oea_mm_with_seq(inst, cfg, &mut NoHooks).map(|(o, _)| o)
}

pub fn run_oea_mm_with_seq(
    inst: &Instance,
    cfg: &SolverConfig,
    hooks: &mut dyn SolverHooks,
) -> Result<(Outcome, CertIndexSeq)> {
    let default_cap = cfg.resolved_max_iter(&inst.problem, &inst.bounds.l).saturating_add(2);
    let cap = cfg.mm_cap.unwrap_or(default_cap).min(crate::oea::MAX_ITER_CAP);
    let mut strat = Deferred { seq: CertIndexSeq::new(inst.bounds.lambda.clone()), cap, degraded: false };
    let out = run_with_strategy(inst, cfg, &mut strat, hooks)?;
    Ok((out, strat.seq))
}

const MAGIC: &[u8; 4] = b"OEAS";
const VERSION: u32 = 1;

/// Layout (little endian): magic `OEAS`, u32 version, u32 m, u64 k, `Λ⁽⁰⁾` as m·m f64 column-major,
/// then k records of (u32 j, m f64 λ̂).
pub fn write_sidecar<W: Write>(seq: &CertIndexSeq, mut w: W) -> Result<()> {
    let m = seq.m();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m as u32).to_le_bytes())?;
    w.write_all(&(seq.len() as u64).to_le_bytes())?;
    for x in seq.initial_lambda.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    for (lh, j) in &seq.pairs {
        w.write_all(&(*j as u32).to_le_bytes())?;
        for x in lh.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_sidecar<R: Read>(mut r: R) -> Result<CertIndexSeq> {
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    if &b4 != MAGIC {
        return Err(Error::Parse("not a certificate-index sidecar".into()));
    }
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported sidecar version {version}")));
    }
    r.read_exact(&mut b4)?;
    let m = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8)?;
    let k = u64::from_le_bytes(b8) as usize;
    let mut read_f64 = |r: &mut R| -> Result<f64> {
        r.read_exact(&mut b8)?;
        Ok(f64::from_le_bytes(b8))
    };
    let mut data = Vec::with_capacity(m * m);
    for _ in 0..m * m {
        data.push(read_f64(&mut r)?);
    }
    let mut seq = CertIndexSeq::new(DMatrix::from_vec(m, m, data));
    for _ in 0..k {
        let mut bj = [0u8; 4];
        r.read_exact(&mut bj)?;
        let j = u32::from_le_bytes(bj) as usize;
        if j >= m {
            return Err(Error::Parse(format!("pair index {j} out of range")));
        }
        let mut lh = DVector::zeros(m);
        for i in 0..m {
            lh[i] = read_f64(&mut r)?;
        }
        seq.pairs.push((lh, j));
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_multiplier_gives_unit_vector() {
        let mut seq = CertIndexSeq::new(DMatrix::identity(3, 3));
        seq.pairs.push((DVector::zeros(3), 1));
        let (lb, _) = backsolve(&seq, 1);
        assert_eq!(lb.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn matches_dense_recursion() {
        let mut seq = CertIndexSeq::new(DMatrix::from_fn(4, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.25));
        seq.pairs.push((DVector::from_vec(vec![-0.5, 0.2, 0.0, 1.0]), 2));
        seq.pairs.push((DVector::from_vec(vec![0.3, -1.0, -0.1, 0.0]), 0));
        seq.pairs.push((DVector::from_vec(vec![0.0, 0.4, -0.7, 0.2]), 2));
        let dense = lambda_by_recursion(&seq);
        for t in 0..4 {
            let (lb, _) = backsolve(&seq, t);
            let mut expect = dense.column(t).clone_owned();
            expect[t] += 1.0;
            assert!((lb - expect).amax() < 1e-14);
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let p = ProblemData::new(
            DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            DVector::from_vec(vec![-0.5, -0.5]),
        )
        .unwrap();
        let seq = CertIndexSeq::new(DMatrix::identity(2, 2));
        assert!(matches!(backsolve_type_l(&p, &seq), Err(Error::EmptySequence)));
    }

    #[test]
    fn deferred_matches_full_matrix() {
        use crate::generate::{gen_instance, GenSpec};
        use crate::oea::{run_oea, OutcomeKind};
        for seed in 0..6 {
            let inst = gen_instance(&GenSpec::infeasible_shifted(2, 2, 0.3, Some(1.0), seed)).unwrap();
            let cfg = SolverConfig::default();
            let full = run_oea(&inst, &cfg).unwrap();
            let (mm, seq) = run_oea_mm_with_seq(&inst, &cfg, &mut NoHooks).unwrap();
            let none = run_oea_no_alt(&inst, &cfg).unwrap();
            assert_eq!(full.iterations, mm.iterations);
            assert_eq!(full.iterations, none.iterations);
            assert!(matches!(none.kind, OutcomeKind::InfeasibleDeclared));
            match (&full.kind, &mm.kind) {
                (OutcomeKind::InfeasibleTypeL(a), OutcomeKind::InfeasibleTypeL(b)) => {
                    assert!((&a.lambda_bar - &b.lambda_bar).amax() < 1e-10);
                    let c = backsolve_type_l(&inst.problem, &seq).unwrap();
                    assert!((&c.lambda_bar - &a.lambda_bar).amax() < 1e-10);
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let mut seq = CertIndexSeq::new(DMatrix::from_fn(3, 3, |i, j| (i + 2 * j) as f64 / 3.0));
        seq.pairs.push((DVector::from_vec(vec![0.1, -0.2, 1e-300]), 2));
        seq.pairs.push((DVector::from_vec(vec![f64::MIN_POSITIVE, 3.5, -7.25]), 0));
        let mut buf = Vec::new();
        write_sidecar(&seq, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 4 + 8 + 9 * 8 + 2 * (4 + 3 * 8));
        let back = read_sidecar(buf.as_slice()).unwrap();
        assert_eq!(back, seq);
        assert!(read_sidecar(&b"XXXX"[..]).is_err());
    }
}
