//! Lower-bound certificates, type-L certificates and their validators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ellipsoid::EllipsoidState;
use crate::error::{Error, Result};
use crate::problem::{verify_certified_bounds, CertifiedBounds, ProblemData};

/// Margin enforcing `u^T λ̄ < 0`.
pub const TOL_STRICT: f64 = 1e-10;
/// Default tolerance for certificate validation.
pub const TOL_CERT: f64 = 1e-8;

/// A solution `λ̄` of `Aλ = 0, λ >= 0, u^T λ < 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeLCertificate {
    pub lambda_bar: DVector<f64>,
    /// `‖A λ̄‖_∞`
    pub residual_eq: f64,
    pub min_entry: f64,
    /// `-u^T λ̄`
    pub slack: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeLReport {
    #[serde(rename = "eq")]
    pub eq_residual: f64,
    pub min_entry: f64,
    pub u_dot: f64,
    #[serde(skip, default)]
    pub pass: bool,
}

pub fn verify_type_l(p: &ProblemData, lambda_bar: &DVector<f64>, tol: f64) -> Result<TypeLReport> {
    verify_type_l_strict(p, lambda_bar, tol, TOL_STRICT)
}

pub fn verify_type_l_strict(
    p: &ProblemData,
    lambda_bar: &DVector<f64>,
    tol: f64,
    tol_strict: f64,
) -> Result<TypeLReport> {
    if lambda_bar.len() != p.m() {
        return Err(Error::DimensionMismatch(format!(
            "certificate has length {}, expected {}",
            lambda_bar.len(),
            p.m()
        )));
    }
    let eq = (p.a() * lambda_bar).amax();
    let min_entry = lambda_bar.min();
    let u_dot = p.u().dot(lambda_bar);
    let l1 = lambda_bar.lp_norm(1);
    let pass = lambda_bar.iter().all(|x| x.is_finite())
        && eq <= tol * l1.max(1.0)
        && min_entry >= -tol
        && u_dot <= -tol_strict;
    Ok(TypeLReport { eq_residual: eq, min_entry, u_dot, pass })
}

impl TypeLCertificate {
    /// Validates `lambda_bar` and wraps it.
    pub fn new(p: &ProblemData, lambda_bar: DVector<f64>) -> Result<Self> {
        let rep = verify_type_l(p, &lambda_bar, TOL_CERT)?;
        if !rep.pass {
            return Err(Error::NotACertificate(format!(
                "‖Aλ‖∞ = {:e}, min entry = {:e}, u·λ = {:e}",
                rep.eq_residual, rep.min_entry, rep.u_dot
            )));
        }
        Ok(Self { lambda_bar, residual_eq: rep.eq_residual, min_entry: rep.min_entry, slack: -rep.u_dot })
    }

    pub fn report(&self) -> TypeLReport {
        TypeLReport { eq_residual: self.residual_eq, min_entry: self.min_entry, u_dot: -self.slack, pass: true }
    }
}

/// A certified lower bound `a_i^T x >= bound` with multiplier `λ̃_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCertificate {
    pub i: usize,
    pub bound: f64,
    pub lambda_tilde: DVector<f64>,
    pub lambda_hat: DVector<f64>,
}

fn require_unit_f(s: &EllipsoidState) -> Result<()> {
    if !(s.f > 0.0) || (s.f - 1.0).abs() > 1e-8 {
        return Err(Error::Precondition(format!("state must have f = 1, got {}", s.f)));
    }
    Ok(())
}

/// Returns `L_i = a_i^T y - γ_i` and `λ̂_i = γ_i D t - D A^T B^{-1} a_i`.
pub fn slab_multiplier(p: &ProblemData, s: &EllipsoidState, i: usize) -> Result<(f64, DVector<f64>)> {
    require_unit_f(s)?;
    let a = p.a();
    let gamma = s.gamma(p, i)?;
    let w = &s.binv * a.column(i);
    let atw = a.tr_mul(&w);
    let mut lh = DVector::zeros(s.m());
    for k in 0..s.m() {
        lh[k] = s.d[k] * (gamma * s.t[k] - atw[k]);
    }
    let bound = a.column(i).dot(&s.y) - gamma;
    Ok((bound, lh))
}

/// `Λ λ̂^- + λ̂^+`
pub fn lift(lambda: &DMatrix<f64>, lambda_hat: &DVector<f64>) -> DVector<f64> {
    let minus = lambda_hat.map(|x| (-x).max(0.0));
    let plus = lambda_hat.map(|x| x.max(0.0));
    lambda * minus + plus
}

pub fn certify_slab_bound(
    p: &ProblemData,
    s: &EllipsoidState,
    b: &CertifiedBounds,
    i: usize,
) -> Result<BoundCertificate> {
    let (bound, lambda_hat) = slab_multiplier(p, s, i)?;
    let lambda_tilde = lift(&b.lambda, &lambda_hat);
    Ok(BoundCertificate { i, bound, lambda_tilde, lambda_hat })
}

/// `λ̄ = λ_j + e_j`, validated.
pub fn type_l_from_bound_violation(p: &ProblemData, lambda_j: &DVector<f64>, j: usize) -> Result<TypeLCertificate> {
    if lambda_j.len() != p.m() || j >= p.m() {
        return Err(Error::DimensionMismatch("multiplier or index out of range".into()));
    }
    let mut lb = lambda_j.clone();
    lb[j] += 1.0;
    TypeLCertificate::new(p, lb)
}

/// Whether every point of the ellipsoid violates constraint `j`.
pub fn verify_type_e(p: &ProblemData, s: &EllipsoidState, j: usize) -> Result<bool> {
    let g = s.gamma(p, j)?;
    Ok(p.u()[j] < p.a().column(j).dot(&s.y) - g)
}

/// Lowest index attaining the maximum of `A^T y - u`.
pub fn argmax_violation(viol: &DVector<f64>) -> (usize, f64) {
    let mut best = (0, viol[0]);
    for (i, &v) in viol.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// How a type-Q certificate was converted.
#[derive(Debug, Clone, PartialEq)]
pub enum TypeQResolution {
    /// `ℓ_j > u_j` already; the certificate is `λ_j + e_j`.
    BoundViolation { j: usize },
    /// After shrinking ℓ the slab bound `L_k` exceeds `u_k`; the certificate is `lift(λ̂) + e_k`.
    Slab { k: usize, lambda_hat: DVector<f64> },
}

/// Runs the type-Q conversion on a copy of `s`, stopping short of lifting through `Λ`.
///
/// When `check` is given, the certified-bound system is re-verified after each decrease of ℓ.
pub fn resolve_type_q(
    p: &ProblemData,
    s: &EllipsoidState,
    tol_f: f64,
    check: Option<&DMatrix<f64>>,
) -> Result<TypeQResolution> {
    let u = p.u();
    let m = p.m();
    if !s.f_is_nonpositive(tol_f) {
        return Err(Error::Precondition(format!("type-Q conversion needs f <= 0, got {}", s.f)));
    }
    if let Some(j) = (0..m).find(|&j| s.l[j] > u[j]) {
        return Ok(TypeQResolution::BoundViolation { j });
    }
    let viol = s.violations(p);
    let (i, di) = argmax_violation(&viol);
    if !(di > 0.0) {
        return Err(Error::Precondition("type-Q conversion needs an infeasible center".into()));
    }
    let mut w = s.clone();
    let verify = |w: &EllipsoidState, what: &str| -> Result<()> {
        if let Some(lambda) = check {
            let b = CertifiedBounds { l: w.l.clone(), lambda: lambda.clone() };
            let rep = verify_certified_bounds(p, &b, 1e-8)?;
            if !rep.pass {
                return Err(Error::InvariantViolation(format!("lower bounds lost certification after {what}")));
            }
        }
        Ok(())
    };

    // shrink to a point ellipsoid: f(d, ℓ - βe_i) = 0
    let si = w.quad(p, i);
    let disc = (di * di - w.f * si).max(0.0);
    let beta = (2.0 * di + 2.0 * disc.sqrt()) / (w.d[i] * si);
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::NumericalBreakdown(format!("no valid β (got {beta})")));
    }
    w.shift_l(p, i, -beta);
    verify(&w, "the β step")?;

    let viol = w.violations(p);
    // most satisfied constraint for j, most violated for k
    let mut j = None;
    for (idx, &v) in viol.iter().enumerate() {
        if v <= 0.0 && j.map_or(true, |jj: usize| v < viol[jj]) {
            j = Some(idx);
        }
    }
    let (k, delta) = argmax_violation(&viol);
    let j = j.ok_or_else(|| Error::NumericalBreakdown("no satisfied constraint after the β step".into()))?;
    if !(delta > 0.0) {
        return Err(Error::NumericalBreakdown("no violated constraint after the β step".into()));
    }

    // ε solving a_k^T y(ε) - γ_k(ε) = u_k + δ/2
    let a = p.a();
    let wj = &w.binv * a.column(j);
    let c1 = 0.5 * w.d[j] * a.column(k).dot(&wj);
    let ap = -viol[j] * w.d[j];
    let bq = 0.25 * w.d[j] * w.d[j] * a.column(j).dot(&wj);
    let s2 = w.quad(p, k);
    let f0 = w.f;
    let q2 = c1 * c1 - s2 * bq;
    let q1 = -(delta * c1 + s2 * ap);
    let q0 = 0.25 * delta * delta - s2 * f0;
    if !(q0 > 0.0) {
        return Err(Error::NumericalBreakdown("degenerate ε equation".into()));
    }
    // below the smallest positive root of q2 ε² + q1 ε + q0 the slab bound stays above u_k + δ/2;
    // when there is no root (collinear a_j, a_k) any ε > 0 works, so cap at the natural scale
    let cap = delta / (s2.sqrt() * bq.sqrt()).max(f64::MIN_POSITIVE);
    let root = (q1 * q1 - 4.0 * q2 * q0).max(0.0).sqrt();
    let den = -q1 + root;
    let eps = if den > 0.0 { (2.0 * q0 / den).min(cap) } else { cap };
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::NumericalBreakdown(format!("no valid ε (got {eps})")));
    }
    w.shift_l(p, j, -eps);
    verify(&w, "the ε step")?;
    if !(w.f > 0.0) {
        return Err(Error::NumericalBreakdown(format!("ε step left f = {}", w.f)));
    }
    w.rescale_unit_f(p)?;
    let (bound, lambda_hat) = slab_multiplier(p, &w, k)?;
    if !(bound > u[k]) {
        return Err(Error::NumericalBreakdown(format!("slab bound {bound} does not exceed u_k = {}", u[k])));
    }
    Ok(TypeQResolution::Slab { k, lambda_hat })
}

/// Converts a type-Q certificate `(d, ℓ, Λ)` into a type-L certificate.
///
/// ℓ is taken from `s`; `b` supplies `Λ`.
pub fn procedure_1(p: &ProblemData, s: &EllipsoidState, b: &CertifiedBounds) -> Result<TypeLCertificate> {
    procedure_1_tol(p, s, b, 1e-12)
}

pub fn procedure_1_tol(p: &ProblemData, s: &EllipsoidState, b: &CertifiedBounds, tol_f: f64) -> Result<TypeLCertificate> {
    let check = if cfg!(debug_assertions) { Some(&b.lambda) } else { None };
    match resolve_type_q(p, s, tol_f, check)? {
        TypeQResolution::BoundViolation { j } => type_l_from_bound_violation(p, &b.lambda.column(j).clone_owned(), j),
        TypeQResolution::Slab { k, lambda_hat } => {
            type_l_from_bound_violation(p, &lift(&b.lambda, &lambda_hat), k)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ellipsoid::derive_state;
    use crate::problem::{from_box, BoxSystem};

    fn pair() -> (ProblemData, CertifiedBounds) {
        let p =
            ProblemData::new(DMatrix::from_row_slice(1, 2, &[1.0, -1.0]), DVector::from_vec(vec![-0.5, -0.5])).unwrap();
        let b = CertifiedBounds {
            l: DVector::from_vec(vec![-1.0, -1.0]),
            lambda: DMatrix::from_column_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
        };
        (p, b)
    }

    fn square() -> (ProblemData, CertifiedBounds) {
        let bx = BoxSystem {
            a_hat: DMatrix::zeros(2, 0),
            u_hat: DVector::zeros(0),
            lo: DVector::from_element(2, -1.0),
            hi: DVector::from_element(2, 1.0),
        };
        from_box(&bx).unwrap()
    }

    #[test]
    fn square_slab_certificate() {
        let (p, b) = square();
        let s = derive_state(&p, &DVector::from_element(4, 0.25), &b.l).unwrap();
        let c = certify_slab_bound(&p, &s, &b, 0).unwrap();
        assert!((&c.lambda_hat - DVector::from_vec(vec![-0.5, 0.0, 0.5, 0.0])).amax() < 1e-15);
        assert!((&c.lambda_tilde - DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0])).amax() < 1e-15);
        assert!((c.bound + 2f64.sqrt()).abs() < 1e-15);
        assert!(-c.lambda_tilde.dot(p.u()) >= c.bound);
        let unscaled = derive_state(&p, &DVector::from_element(4, 1.0), &b.l).unwrap();
        assert!(certify_slab_bound(&p, &unscaled, &b, 0).is_err());
    }

    #[test]
    fn pair_bound_violation_certificate() {
        let (p, _) = pair();
        let c = type_l_from_bound_violation(&p, &DVector::from_vec(vec![0.0, 1.0]), 0).unwrap();
        assert_eq!(c.lambda_bar.as_slice(), &[1.0, 1.0]);
        assert_eq!(c.residual_eq, 0.0);
        assert_eq!(c.slack, 1.0);
        let bad = type_l_from_bound_violation(&p, &DVector::from_vec(vec![0.0, 0.5]), 0);
        assert!(matches!(bad, Err(Error::NotACertificate(_))));
    }

    #[test]
    fn fabricated_square_violation() {
        let (p0, _) = square();
        let mut u = p0.u().clone();
        u[0] = -2.0;
        let p = ProblemData::new(p0.a().clone(), u).unwrap();
        // λ̃_1 = e_3 certifies a_1^T x >= -1 > u_1
        let c = type_l_from_bound_violation(&p, &DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0]), 0).unwrap();
        assert_eq!(c.lambda_bar.as_slice(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn verify_type_l_cases() {
        let (p, _) = pair();
        assert!(verify_type_l(&p, &DVector::from_vec(vec![1.0, 1.0]), 1e-8).unwrap().pass);
        assert!(!verify_type_l(&p, &DVector::zeros(2), 1e-8).unwrap().pass);
        assert!(!verify_type_l(&p, &DVector::from_vec(vec![-0.5, 1.0]), 1e-8).unwrap().pass);
        assert!(verify_type_l(&p, &DVector::zeros(3), 1e-8).is_err());
    }

    #[test]
    fn type_e_cases() {
        let (p, b) = square();
        let s = derive_state(&p, &DVector::from_element(4, 1.0), &b.l).unwrap();
        for j in 0..4 {
            assert!(!verify_type_e(&p, &s, j).unwrap());
        }
        // f = 1, B^{-1} = I/2, y = 0: threshold a_1^T y - γ_1 = -sqrt(1/2)
        let mut s3 = s.clone();
        s3.f = 1.0;
        s3.binv = DMatrix::identity(2, 2) * 0.5;
        let mut u = p.u().clone();
        u[0] = -(0.5f64.sqrt());
        let p3 = ProblemData::new(p.a().clone(), u).unwrap();
        assert!(!verify_type_e(&p3, &s3, 0).unwrap());
        let mut u = p.u().clone();
        u[0] = -0.71;
        let p4 = ProblemData::new(p.a().clone(), u).unwrap();
        assert!(verify_type_e(&p4, &s3, 0).unwrap());
    }

    #[test]
    fn procedure_1_immediate_certificate() {
        let (p, mut b) = pair();
        b.l = DVector::from_element(2, -0.1);
        let s = derive_state(&p, &DVector::from_element(2, 1.0), &b.l).unwrap();
        assert!((s.f + 0.1).abs() < 1e-15);
        let c = procedure_1(&p, &s, &b).unwrap();
        assert_eq!(c.lambda_bar.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn procedure_1_full_path() {
        let (p, b) = pair();
        let s = derive_state(&p, &DVector::from_element(2, 1.0), &b.l).unwrap();
        let si = s.quad(&p, 0);
        let beta = (2.0 * 0.5 + 2.0 * (0.25 - s.f * si).sqrt()) / (1.0 * si);
        assert!((beta - 5.464101615137754).abs() < 1e-12);
        let c = procedure_1(&p, &s, &b).unwrap();
        let rep = verify_type_l(&p, &c.lambda_bar, 1e-9).unwrap();
        assert!(rep.pass);
        assert!(rep.u_dot <= -1e-10);
    }

    #[test]
    fn procedure_1_rejects_positive_f() {
        let (p, b) = square();
        let s = derive_state(&p, &DVector::from_element(4, 1.0), &b.l).unwrap();
        assert!(matches!(procedure_1(&p, &s, &b), Err(Error::Precondition(_))));
    }
}
