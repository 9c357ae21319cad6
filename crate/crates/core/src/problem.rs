//! Instance data: the system `A^T x <= u`, certified lower bounds and box initialization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative threshold below which a singular value counts as zero.
pub const RANK_TOL: f64 = 1e-10;

/// The pair `(A, u)` with unit-norm columns `a_i` of `A` (n x m).
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemData {
    a: DMatrix<f64>,
    u: DVector<f64>,
}

impl ProblemData {
    /// Builds problem data from columns that are already unit norm.
    pub fn new(a: DMatrix<f64>, u: DVector<f64>) -> Result<Self> {
        let (n, m) = a.shape();
        if u.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "A has {m} columns but u has length {}",
                u.len()
            )));
        }
        if n == 0 {
            return Err(Error::InvalidInput("n must be positive".into()));
        }
        if m <= n {
            return Err(Error::InvalidInput(format!("need m > n, got m={m}, n={n}")));
        }
        if a.iter().chain(u.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite entry in A or u".into()));
        }
        for (j, col) in a.column_iter().enumerate() {
            let nrm = col.norm();
            if nrm == 0.0 {
                return Err(Error::ZeroColumn(j));
            }
            if (nrm - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!("column {j} has norm {nrm}, expected 1")));
            }
        }
        let rank = numerical_rank(&a);
        if rank < n {
            return Err(Error::RankDeficient { rank, n });
        }
        Ok(Self { a, u })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.a.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn u(&self) -> &DVector<f64> {
        &self.u
    }

    /// Constraint values `A^T x - u`.
    pub fn violations(&self, x: &DVector<f64>) -> DVector<f64> {
        self.a.tr_mul(x) - &self.u
    }

    /// Whether `A^T x <= u + tol`.
    pub fn is_feasible(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.violations(x).iter().all(|&v| v <= tol)
    }
}

/// Number of singular values above `RANK_TOL * sigma_max`.
pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * smax).count()
}

/// Column scale factors `‖a_j‖`; columns within a few ulps of unit norm keep factor 1.
fn column_scales(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    a.column_iter()
        .enumerate()
        .map(|(j, c)| {
            let nrm = c.norm();
            if nrm == 0.0 || !nrm.is_finite() {
                Err(Error::ZeroColumn(j))
            } else if (nrm - 1.0).abs() <= 4.0 * f64::EPSILON {
                Ok(1.0)
            } else {
                Ok(nrm)
            }
        })
        .collect()
}

/// Scales each column of `A` and the matching entry of `u` to unit norm.
pub fn normalize_columns(a_raw: &DMatrix<f64>, u_raw: &DVector<f64>) -> Result<ProblemData> {
    if u_raw.len() != a_raw.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "A has {} columns but u has length {}",
            a_raw.ncols(),
            u_raw.len()
        )));
    }
    let s = column_scales(a_raw)?;
    let mut a = a_raw.clone();
    let mut u = u_raw.clone();
    for (j, &sj) in s.iter().enumerate() {
        if sj != 1.0 {
            a.column_mut(j).unscale_mut(sj);
            u[j] /= sj;
        }
    }
    ProblemData::new(a, u)
}

/// Normalizes `A` and transforms certified bounds `(ℓ, Λ)` so they certify the normalized system.
pub fn normalize_with_bounds(
    a_raw: &DMatrix<f64>,
    u_raw: &DVector<f64>,
    bounds: &CertifiedBounds,
) -> Result<(ProblemData, CertifiedBounds)> {
    let m = a_raw.ncols();
    if bounds.l.len() != m || bounds.lambda.shape() != (m, m) {
        return Err(Error::DimensionMismatch("l / Lambda do not match m".into()));
    }
    let s = column_scales(a_raw)?;
    let p = normalize_columns(a_raw, u_raw)?;
    let mut l = bounds.l.clone();
    let mut lambda = bounds.lambda.clone();
    // column i certifies a_i; entry k multiplies a_k
    for i in 0..m {
        l[i] /= s[i];
        for k in 0..m {
            lambda[(k, i)] *= s[k] / s[i];
        }
    }
    Ok((p, CertifiedBounds { l, lambda }))
}

/// A general system `Â^T x <= û` together with the box `lo <= x <= hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSystem {
    /// n x m̂ matrix of general columns (may be empty).
    pub a_hat: DMatrix<f64>,
    pub u_hat: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl BoxSystem {
    pub fn n(&self) -> usize {
        self.lo.len()
    }

    pub fn m_hat(&self) -> usize {
        self.a_hat.ncols()
    }

    pub fn diameter(&self) -> f64 {
        (&self.hi - &self.lo).norm()
    }
}

/// Lower bounds `ℓ` with certificate matrix `Λ` (columns `λ_i`): `AΛ = -A`, `Λ >= 0`, `-Λ^T u >= ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CertifiedBounds {
    pub l: DVector<f64>,
    pub lambda: DMatrix<f64>,
}

/// Residuals of the lower-bound system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundsReport {
    /// max |AΛ + A| entry
    pub eq_residual: f64,
    pub min_entry: f64,
    /// min over i of `-λ_i^T u - ℓ_i`
    pub min_slack: f64,
    pub pass: bool,
}

pub fn verify_certified_bounds(p: &ProblemData, b: &CertifiedBounds, tol: f64) -> Result<BoundsReport> {
    let m = p.m();
    if b.l.len() != m || b.lambda.shape() != (m, m) {
        return Err(Error::DimensionMismatch("bounds do not match problem size".into()));
    }
    let eq = (p.a() * &b.lambda + p.a()).amax();
    let min_entry = b.lambda.min();
    let slack = -b.lambda.tr_mul(p.u()) - &b.l;
    let min_slack = slack.min();
    let pass = eq <= tol && min_entry >= -tol && min_slack >= -tol;
    Ok(BoundsReport { eq_residual: eq, min_entry, min_slack, pass })
}

/// Ground-truth labels supplied by generators; never read by the solvers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasible: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub problem: ProblemData,
    pub bounds: CertifiedBounds,
    pub d0: DVector<f64>,
    pub meta: InstanceMeta,
    /// Box data when the instance was built from one.
    pub source_box: Option<BoxSystem>,
}

impl Instance {
    pub fn new(problem: ProblemData, bounds: CertifiedBounds) -> Self {
        let m = problem.m();
        Self { problem, bounds, d0: DVector::from_element(m, 1.0), meta: InstanceMeta::default(), source_box: None }
    }

    /// Builds an instance from a box system.
    pub fn from_box(bx: BoxSystem) -> Result<Self> {
        let (p, b) = from_box(&bx)?;
        let mut inst = Self::new(p, b);
        inst.source_box = Some(bx);
        Ok(inst)
    }

    pub fn with_meta(mut self, meta: InstanceMeta) -> Self {
        self.meta = meta;
        self
    }
}

fn pos(x: f64) -> f64 {
    x.max(0.0)
}

fn neg(x: f64) -> f64 {
    (-x).max(0.0)
}

/// Appends the box constraints to `Â` and builds the certified bounds they induce.
pub fn from_box(bx: &BoxSystem) -> Result<(ProblemData, CertifiedBounds)> {
    let n = bx.n();
    let mh = bx.m_hat();
    if bx.hi.len() != n || bx.a_hat.nrows() != n || bx.u_hat.len() != mh {
        return Err(Error::DimensionMismatch("box system dimensions disagree".into()));
    }
    if n == 0 {
        return Err(Error::InvalidInput("n must be positive".into()));
    }
    for i in 0..n {
        if !(bx.lo[i] <= bx.hi[i]) || !bx.lo[i].is_finite() || !bx.hi[i].is_finite() {
            return Err(Error::InvalidInput(format!("box coordinate {i} has lo > hi or non-finite bound")));
        }
    }
    let s = column_scales(&bx.a_hat)?;
    let mut a_hat = bx.a_hat.clone();
    let mut u_hat = bx.u_hat.clone();
    for (j, &sj) in s.iter().enumerate() {
        if sj != 1.0 {
            a_hat.column_mut(j).unscale_mut(sj);
            u_hat[j] /= sj;
        }
    }

    let m = mh + 2 * n;
    let mut a = DMatrix::zeros(n, m);
    let mut u = DVector::zeros(m);
    let mut l = DVector::zeros(m);
    let mut lambda = DMatrix::zeros(m, m);
    for i in 0..mh {
        let col = a_hat.column(i);
        a.set_column(i, &col);
        u[i] = u_hat[i];
        let mut lo_val = 0.0;
        let mut hi_val = 0.0;
        for k in 0..n {
            let c = col[k];
            lo_val += pos(c) * bx.lo[k] - neg(c) * bx.hi[k];
            hi_val += pos(c) * bx.hi[k] - neg(c) * bx.lo[k];
            lambda[(mh + k, i)] = neg(c);
            lambda[(mh + n + k, i)] = pos(c);
        }
        if u[i] > hi_val + 1e-12 * (1.0 + hi_val.abs()) {
            return Err(Error::RedundantConstraint(i));
        }
        l[i] = lo_val;
    }
    for k in 0..n {
        let up = mh + k;
        let dn = mh + n + k;
        a[(k, up)] = 1.0;
        a[(k, dn)] = -1.0;
        u[up] = bx.hi[k];
        u[dn] = -bx.lo[k];
        l[up] = bx.lo[k];
        l[dn] = -bx.hi[k];
        lambda[(dn, up)] = 1.0;
        lambda[(up, dn)] = 1.0;
    }
    if let Some(i) = (0..mh).find(|&i| l[i] > u[i]) {
        let mut lb = lambda.column(i).clone_owned();
        lb[i] += 1.0;
        return Err(Error::ImmediateInfeasible { index: i, lambda_bar: lb.iter().cloned().collect() });
    }
    let p = ProblemData::new(a, u)?;
    Ok((p, CertifiedBounds { l, lambda }))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn unit_square() -> BoxSystem {
        BoxSystem {
            a_hat: DMatrix::zeros(2, 0),
            u_hat: DVector::zeros(0),
            lo: DVector::from_vec(vec![-1.0, -1.0]),
            hi: DVector::from_vec(vec![1.0, 1.0]),
        }
    }

    #[test]
    fn square_box_layout() {
        let (p, b) = from_box(&unit_square()).unwrap();
        assert_eq!(p.m(), 4);
        assert_eq!(p.u().as_slice(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(b.l.as_slice(), &[-1.0, -1.0, -1.0, -1.0]);
        // Λ = [e3 | e4 | e1 | e2]
        let expect = [2usize, 3, 0, 1];
        for (i, &k) in expect.iter().enumerate() {
            for r in 0..4 {
                assert_eq!(b.lambda[(r, i)], if r == k { 1.0 } else { 0.0 });
            }
        }
        let rep = verify_certified_bounds(&p, &b, 0.0).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.eq_residual, 0.0);
    }

    #[test]
    fn diagonal_cut_lower_bound() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let bx = BoxSystem {
            a_hat: DMatrix::from_column_slice(2, 1, &[h, h]),
            u_hat: DVector::from_vec(vec![-1.2]),
            ..unit_square()
        };
        let (p, b) = from_box(&bx).unwrap();
        assert!((b.l[0] + 2f64.sqrt()).abs() < 1e-15);
        let col = b.lambda.column(0);
        assert_eq!(col[0], 0.0);
        assert_eq!((col[1], col[2]), (0.0, 0.0));
        assert!((col[3] - h).abs() < 1e-16 && (col[4] - h).abs() < 1e-16);
        assert!(verify_certified_bounds(&p, &b, 1e-12).unwrap().pass);
    }

    #[test]
    fn redundant_cut_rejected() {
        let bx = BoxSystem {
            a_hat: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            u_hat: DVector::from_vec(vec![5.0]),
            ..unit_square()
        };
        assert!(matches!(from_box(&bx), Err(Error::RedundantConstraint(0))));
    }

    #[test]
    fn cut_below_box_is_immediately_infeasible() {
        let bx = BoxSystem {
            a_hat: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            u_hat: DVector::from_vec(vec![-3.0]),
            ..unit_square()
        };
        match from_box(&bx) {
            Err(Error::ImmediateInfeasible { index: 0, lambda_bar }) => {
                assert_eq!(lambda_bar, vec![1.0, 0.0, 0.0, 1.0, 0.0]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn normalize_scales_u() {
        let a = DMatrix::from_column_slice(1, 2, &[2.0, -4.0]);
        let u = DVector::from_vec(vec![1.0, 2.0]);
        let p = normalize_columns(&a, &u).unwrap();
        assert_eq!(p.a().as_slice(), &[1.0, -1.0]);
        assert_eq!(p.u().as_slice(), &[0.5, 0.5]);
        let q = normalize_columns(p.a(), p.u()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn normalize_rejects_zero_and_rank_deficient() {
        let a = DMatrix::from_column_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, -1.0, 0.0]);
        let u = DVector::from_element(3, 1.0);
        assert!(matches!(normalize_columns(&a, &u), Err(Error::ZeroColumn(1))));
        let a = DMatrix::from_column_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, -1.0, 0.0]);
        assert!(matches!(normalize_columns(&a, &u), Err(Error::RankDeficient { rank: 1, n: 2 })));
    }

    #[test]
    fn bounds_follow_normalization() {
        let a = DMatrix::from_column_slice(1, 2, &[2.0, -3.0]);
        let u = DVector::from_vec(vec![-1.0, -1.5]);
        // a_1 certified by λ_1 = (0, 2/3): A λ_1 = -2; bound -λ^T u = 1
        let b = CertifiedBounds {
            l: DVector::from_vec(vec![1.0, 1.5]),
            lambda: DMatrix::from_column_slice(2, 2, &[0.0, 2.0 / 3.0, 1.5, 0.0]),
        };
        let (pn, bn) = normalize_with_bounds(&a, &u, &b).unwrap();
        assert!(verify_certified_bounds(&pn, &bn, 1e-14).unwrap().pass);
        assert!((bn.l[0] - 0.5).abs() < 1e-15);
    }
}
