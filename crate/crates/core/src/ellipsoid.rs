//! The parametrized ellipsoid `E(d, ℓ) = {x : (A^T x - ℓ)^T D (A^T x - u) <= 0}`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::ProblemData;

/// Minimum accepted Cholesky pivot of `A D A^T`.
pub const PIVOT_TOL: f64 = 1e-12;
/// Updates between full refactorizations of the cached inverse.
pub const DEFAULT_REFRESH_EVERY: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidState {
    pub d: DVector<f64>,
    pub l: DVector<f64>,
    pub r: DVector<f64>,
    pub v: DVector<f64>,
    /// `(A D A^T)^{-1}`
    pub binv: DMatrix<f64>,
    pub y: DVector<f64>,
    pub t: DVector<f64>,
    pub f: f64,
    /// `ln det(A D A^T)`
    pub log_det_b: f64,
    /// Rank-one updates applied since the last factorization.
    pub stale: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub rel_volume: f64,
    pub log_rel_volume: f64,
    pub phi: Option<f64>,
    pub log_phi: Option<f64>,
    pub mu: Option<DVector<f64>>,
}

/// Computes every derived quantity from `(d, ℓ)` by a fresh factorization.
pub fn derive_state(p: &ProblemData, d: &DVector<f64>, l: &DVector<f64>) -> Result<EllipsoidState> {
    let m = p.m();
    if d.len() != m || l.len() != m {
        return Err(Error::DimensionMismatch("d and l must have length m".into()));
    }
    if d.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::Precondition("d must be strictly positive".into()));
    }
    let a = p.a();
    let u = p.u();
    let r = (u + l) * 0.5;
    let v = (u - l) * 0.5;
    let ad = scale_columns(a, d);
    let b = &ad * a.transpose();
    let chol = b.cholesky().ok_or(Error::SingularShape)?;
    let lfac = chol.l_dirty();
    let n = p.n();
    let mut log_det = 0.0;
    for i in 0..n {
        let piv = lfac[(i, i)];
        if !(piv * piv >= PIVOT_TOL) {
            return Err(Error::SingularShape);
        }
        log_det += 2.0 * piv.ln();
    }
    let mut binv = chol.inverse();
    symmetrize(&mut binv);
    let y = &binv * (&ad * &r);
    let t = a.tr_mul(&y) - &r;
    let f = weighted_sq(d, &v) - weighted_sq(d, &t);
    Ok(EllipsoidState { d: d.clone(), l: l.clone(), r, v, binv, y, t, f, log_det_b: log_det, stale: 0 })
}

fn scale_columns(a: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for (j, mut c) in out.column_iter_mut().enumerate() {
        c *= d[j];
    }
    out
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
}

fn weighted_sq(d: &DVector<f64>, x: &DVector<f64>) -> f64 {
    d.iter().zip(x.iter()).map(|(di, xi)| di * xi * xi).sum()
}

impl EllipsoidState {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn m(&self) -> usize {
        self.d.len()
    }

    /// `v^T D v`, the scale against which `f` is compared to zero.
    pub fn f_scale(&self) -> f64 {
        weighted_sq(&self.d, &self.v).max(f64::MIN_POSITIVE)
    }

    /// Whether `f` is numerically nonpositive.
    pub fn f_is_nonpositive(&self, tol_f: f64) -> bool {
        self.f <= tol_f * self.f_scale()
    }

    /// `a_i^T B^{-1} a_i`
    pub fn quad(&self, p: &ProblemData, i: usize) -> f64 {
        let a = p.a().column(i);
        (a.transpose() * &self.binv * a)[(0, 0)]
    }

    /// Slab radius `γ_i = sqrt(f a_i^T B^{-1} a_i)`.
    pub fn gamma(&self, p: &ProblemData, i: usize) -> Result<f64> {
        if !(self.f > 0.0) {
            return Err(Error::Precondition(format!("ellipsoid has no positive volume (f = {})", self.f)));
        }
        Ok((self.f * self.quad(p, i)).max(0.0).sqrt())
    }

    /// Rescales `d` by `1/f` so that `f = 1`.
    pub fn rescale_unit_f(&mut self, p: &ProblemData) -> Result<()> {
        let f = self.f;
        if !(f > 0.0) {
            return Err(Error::Precondition(format!("cannot rescale with f = {f}")));
        }
        if f == 1.0 {
            return Ok(());
        }
        self.d /= f;
        self.binv *= f;
        self.log_det_b -= p.n() as f64 * f.ln();
        self.f = 1.0;
        Ok(())
    }

    /// `d <- d + δ e_j` by a rank-one update; requires `f = 1`.
    pub fn shift_d(&mut self, p: &ProblemData, j: usize, delta: f64) -> Result<()> {
        if (self.f - 1.0).abs() > 1e-8 {
            return Err(Error::Precondition(format!("shift_d needs f = 1, got {}", self.f)));
        }
        if !(delta >= 0.0) {
            return Err(Error::Precondition("shift_d needs delta >= 0".into()));
        }
        if delta == 0.0 {
            return Ok(());
        }
        let a = p.a();
        let w = &self.binv * a.column(j);
        let s = a.column(j).dot(&w);
        let theta = delta / (1.0 + delta * s);
        let tj = self.t[j];
        let vj = self.v[j];
        self.binv.ger(-theta, &w, &w, 1.0);
        symmetrize(&mut self.binv);
        let atw = a.tr_mul(&w);
        self.t.axpy(-theta * tj, &atw, 1.0);
        self.y.axpy(-theta * tj, &w, 1.0);
        self.f += delta * vj * vj - theta * tj * tj;
        self.d[j] += delta;
        self.log_det_b += (delta * s).ln_1p();
        self.stale += 1;
        Ok(())
    }

    /// `ℓ <- ℓ + β e_j`; valid for any `f`.
    pub fn shift_l(&mut self, p: &ProblemData, j: usize, beta: f64) {
        if beta == 0.0 {
            return;
        }
        let a = p.a();
        let w = &self.binv * a.column(j);
        let s = a.column(j).dot(&w);
        let dj = self.d[j];
        let tj = self.t[j];
        let vj = self.v[j];
        self.y.axpy(0.5 * beta * dj, &w, 1.0);
        let atw = a.tr_mul(&w);
        self.t.axpy(0.5 * beta * dj, &atw, 1.0);
        self.t[j] -= 0.5 * beta;
        self.f += beta * (tj - vj) * dj + 0.25 * beta * beta * dj * dj * s;
        self.l[j] += beta;
        self.r[j] += 0.5 * beta;
        self.v[j] -= 0.5 * beta;
        self.stale += 1;
    }

    /// Refactorizes once `refresh_every` rank-one updates have accumulated.
    pub fn maybe_refresh(&mut self, p: &ProblemData, refresh_every: usize) -> Result<bool> {
        if self.stale < refresh_every.max(1) {
            return Ok(false);
        }
        self.refresh(p)?;
        Ok(true)
    }

    pub fn refresh(&mut self, p: &ProblemData) -> Result<()> {
        *self = derive_state(p, &self.d, &self.l)?;
        Ok(())
    }

    /// `A^T y - u`
    pub fn violations(&self, p: &ProblemData) -> DVector<f64> {
        p.violations(&self.y)
    }

    /// Membership test evaluated in both representations.
    pub fn contains(&self, p: &ProblemData, x: &DVector<f64>) -> Result<bool> {
        let (q1, q2) = self.both_forms(p, x);
        let scale = 1f64.max(self.f.abs()).max(q1.abs().max(q2.abs()) * 1e-6);
        if (q1 - q2).abs() > 1e-8 * scale {
            return Err(Error::NumericalBreakdown(format!(
                "ellipsoid representations disagree: {q1} vs {q2}"
            )));
        }
        Ok(q1 <= 1e-9 * 1f64.max(self.f.abs()))
    }

    /// `(A^T x - ℓ)^T D (A^T x - u)` and `(x - y)^T B (x - y) - f`.
    pub fn both_forms(&self, p: &ProblemData, x: &DVector<f64>) -> (f64, f64) {
        let ax = p.a().tr_mul(x);
        let q1: f64 = (0..self.m()).map(|i| self.d[i] * (ax[i] - self.l[i]) * (ax[i] - p.u()[i])).sum();
        let z = x - &self.y;
        let az = p.a().tr_mul(&z);
        let q2 = weighted_sq(&self.d, &az) - self.f;
        (q1, q2)
    }

    /// Volume up to the unit-ball constant, and the potential when `tau` is given.
    pub fn metrics(&self, tau: Option<f64>) -> Result<Metrics> {
        if !(self.f > 0.0) {
            return Err(Error::Precondition(format!("ellipsoid has no positive volume (f = {})", self.f)));
        }
        let n = self.n() as f64;
        let log_rel_volume = 0.5 * n * self.f.ln() - 0.5 * self.log_det_b;
        let (phi, log_phi, mu) = match tau {
            Some(tau) if tau > 0.0 => {
                let m = self.m() as f64;
                let floor = m / (m + 1.0) * tau;
                let mu = self.d.map(|di| (self.f / di).sqrt().max(floor));
                let log_phi: f64 = mu.iter().map(|x| x.ln()).sum();
                (Some(log_phi.exp()), Some(log_phi), Some(mu))
            }
            Some(tau) => return Err(Error::InvalidInput(format!("tau must be positive, got {tau}"))),
            None => (None, None, None),
        };
        Ok(Metrics { rel_volume: log_rel_volume.exp(), log_rel_volume, phi, log_phi, mu })
    }

    /// Largest relative deviation of the cached quantities from a fresh derivation.
    pub fn drift(&self, p: &ProblemData) -> Result<f64> {
        let fresh = derive_state(p, &self.d, &self.l)?;
        let rel = |a: f64, b: f64, s: f64| (a - b).abs() / s.max(1e-300);
        let sb = fresh.binv.amax().max(1.0);
        let sy = fresh.y.amax().max(1.0);
        let st = fresh.t.amax().max(fresh.r.amax()).max(1.0);
        let sf = fresh.f.abs().max(fresh.f_scale()).max(1.0);
        let mut worst = rel(self.f, fresh.f, sf);
        worst = worst.max((&self.binv - &fresh.binv).amax() / sb);
        worst = worst.max((&self.y - &fresh.y).amax() / sy);
        worst = worst.max((&self.t - &fresh.t).amax() / st);
        worst = worst.max(rel(self.log_det_b, fresh.log_det_b, fresh.log_det_b.abs().max(1.0)));
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{from_box, BoxSystem};

    fn square() -> (ProblemData, DVector<f64>) {
        let bx = BoxSystem {
            a_hat: DMatrix::zeros(2, 0),
            u_hat: DVector::zeros(0),
            lo: DVector::from_element(2, -1.0),
            hi: DVector::from_element(2, 1.0),
        };
        let (p, b) = from_box(&bx).unwrap();
        (p, b.l)
    }

    fn pair() -> ProblemData {
        ProblemData::new(DMatrix::from_row_slice(1, 2, &[1.0, -1.0]), DVector::from_vec(vec![-0.5, -0.5])).unwrap()
    }

    #[test]
    fn square_state() {
        let (p, l) = square();
        let s = derive_state(&p, &DVector::from_element(4, 1.0), &l).unwrap();
        assert_eq!(s.y.amax(), 0.0);
        assert_eq!(s.t.amax(), 0.0);
        assert_eq!(s.f, 4.0);
        assert!((&s.binv - DMatrix::identity(2, 2) * 0.5).amax() < 1e-15);
        for i in 0..4 {
            assert!((s.gamma(&p, i).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        }
        let m = s.metrics(Some(1.0)).unwrap();
        assert!((m.rel_volume - 2.0).abs() < 1e-14);
        assert!((m.phi.unwrap() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn pair_state_negative_f() {
        let p = pair();
        let s = derive_state(&p, &DVector::from_element(2, 1.0), &DVector::from_element(2, -1.0)).unwrap();
        assert_eq!(s.y[0], 0.0);
        assert_eq!(s.t.as_slice(), &[0.75, 0.75]);
        assert!((s.f + 1.0).abs() < 1e-15);
        assert!(s.gamma(&p, 0).is_err());
        assert!(s.metrics(None).is_err());
        let mut s2 = s.clone();
        assert!(s2.rescale_unit_f(&p).is_err());
    }

    #[test]
    fn gamma_scale_invariant() {
        let (p, l) = square();
        let s = derive_state(&p, &DVector::from_element(4, 1.0), &l).unwrap();
        let s10 = derive_state(&p, &DVector::from_element(4, 10.0), &l).unwrap();
        for i in 0..4 {
            assert!((s.gamma(&p, i).unwrap() - s10.gamma(&p, i).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn rescale_square() {
        let (p, l) = square();
        let mut s = derive_state(&p, &DVector::from_element(4, 1.0), &l).unwrap();
        s.rescale_unit_f(&p).unwrap();
        assert_eq!(s.d.as_slice(), &[0.25; 4]);
        assert_eq!(s.f, 1.0);
        let fresh = derive_state(&p, &s.d, &s.l).unwrap();
        assert!((fresh.f - 1.0).abs() < 1e-12);
        assert!(s.drift(&p).unwrap() < 1e-12);
        let before = s.clone();
        s.rescale_unit_f(&p).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn shifts_match_recomputation() {
        let (p, l) = square();
        let mut s = derive_state(&p, &DVector::from_element(4, 1.0), &l).unwrap();
        s.rescale_unit_f(&p).unwrap();
        let mut sd = s.clone();
        sd.shift_d(&p, 0, 1.0).unwrap();
        let mut d = s.d.clone();
        d[0] += 1.0;
        let oracle = derive_state(&p, &d, &s.l).unwrap();
        assert!((sd.f - oracle.f).abs() < 1e-12);
        assert!((&sd.binv - &oracle.binv).amax() < 1e-12);
        assert!((&sd.t - &oracle.t).amax() < 1e-12);

        let mut sl = s.clone();
        sl.shift_l(&p, 0, -1.0);
        let mut l2 = s.l.clone();
        l2[0] = -2.0;
        let oracle = derive_state(&p, &s.d, &l2).unwrap();
        assert!((sl.f - oracle.f).abs() < 1e-12);
        assert!((&sl.y - &oracle.y).amax() < 1e-12);
        assert!((&sl.t - &oracle.t).amax() < 1e-12);

        let mut z = s.clone();
        z.shift_d(&p, 2, 0.0).unwrap();
        z.shift_l(&p, 2, 0.0);
        assert_eq!(z, s);
    }

    #[test]
    fn shift_d_requires_unit_f() {
        let (p, l) = square();
        let mut s = derive_state(&p, &DVector::from_element(4, 1.0), &l).unwrap();
        assert!(matches!(s.shift_d(&p, 0, 1.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn square_membership() {
        let (p, l) = square();
        let s = derive_state(&p, &DVector::from_element(4, 1.0), &l).unwrap();
        assert!(s.contains(&p, &DVector::from_vec(vec![0.0, 0.0])).unwrap());
        let (q1, q2) = s.both_forms(&p, &DVector::from_vec(vec![2.0, 0.0]));
        assert!((q1 - 4.0).abs() < 1e-12 && (q2 - 4.0).abs() < 1e-12);
        assert!(!s.contains(&p, &DVector::from_vec(vec![2.0, 0.0])).unwrap());
        assert!(s.contains(&p, &DVector::from_vec(vec![2f64.sqrt(), 0.0])).unwrap());
    }

    #[test]
    fn potential_floor() {
        let (p, l) = square();
        // sqrt(f/d_i) = 2 < (4/5)·3
        let s = derive_state(&p, &DVector::from_element(4, 1.0), &l).unwrap();
        let m = s.metrics(Some(3.0)).unwrap();
        assert!(m.mu.unwrap().iter().all(|&x| (x - 2.4).abs() < 1e-15));
        assert!((m.phi.unwrap() - 2.4f64.powi(4)).abs() < 1e-12);
        assert!(s.metrics(Some(0.0)).is_err());
    }
}
