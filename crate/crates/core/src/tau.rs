//! Exact condition measure `τ = |max_x min_i (u_i - a_i^T x)|` by vertex enumeration.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::ProblemData;

/// Size limits for the brute-force oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauCaps {
    pub max_m: usize,
    pub max_n: usize,
}

impl Default for TauCaps {
    fn default() -> Self {
        Self { max_m: 12, max_n: 6 }
    }
}

impl TauCaps {
    /// Limits used by the generators and the test suites.
    pub fn generator() -> Self {
        Self { max_m: 16, max_n: 6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauEstimate {
    pub tau: f64,
    pub feasible: bool,
    /// Optimal `z* = max_x min_i (u_i - a_i^T x)`.
    pub z_star: f64,
    /// A maximizer `x`.
    pub x: DVector<f64>,
}

pub fn estimate_tau(p: &ProblemData) -> Result<TauEstimate> {
    estimate_tau_with(p, TauCaps::default(), false)
}

/// Enumerates all `(n+1)`-subsets of constraints, in reverse lexicographic order when `reverse`.
pub fn estimate_tau_with(p: &ProblemData, caps: TauCaps, reverse: bool) -> Result<TauEstimate> {
    let (n, m) = (p.n(), p.m());
    if m > caps.max_m || n > caps.max_n {
        return Err(Error::TooLarge(format!("n={n}, m={m} exceeds oracle caps ({}, {})", caps.max_n, caps.max_m)));
    }
    let k = n + 1;
    let a = p.a();
    let u = p.u();
    let mut subsets = Combinations::new(m, k).collect::<Vec<_>>();
    if reverse {
        subsets.reverse();
    }
    let mut best: Option<(f64, DVector<f64>)> = None;
    for idx in subsets {
        let mut mat = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..n {
                mat[(r, c)] = a[(c, i)];
            }
            mat[(r, n)] = 1.0;
            rhs[r] = u[i];
        }
        let lu = mat.clone().lu();
        let umat = lu.u();
        if (0..k).any(|i| umat[(i, i)].abs() < 1e-12) {
            continue;
        }
        let Some(sol) = lu.solve(&rhs) else { continue };
        if (&mat * &sol - &rhs).amax() > 1e-9 * (1.0 + rhs.amax()) {
            continue;
        }
        let x = sol.rows(0, n).clone_owned();
        let z = sol[n];
        let ok = (0..m).all(|i| a.column(i).dot(&x) + z <= u[i] + 1e-9 * (1.0 + u[i].abs()));
        if ok && best.as_ref().map_or(true, |(bz, _)| z > *bz) {
            best = Some((z, x));
        }
    }
    let (z, x) =
        best.ok_or_else(|| Error::AssumptionViolated("no bounded optimum of the inscribed-ball program".into()))?;
    Ok(TauEstimate { tau: z.abs(), feasible: z >= 0.0, z_star: z, x })
}

/// Lexicographic `k`-subsets of `0..m`.
struct Combinations {
    m: usize,
    idx: Vec<usize>,
    done: bool,
}

impl Combinations {
    fn new(m: usize, k: usize) -> Self {
        Self { m, idx: (0..k).collect(), done: k > m }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.idx.clone();
        let k = self.idx.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.idx[i] < self.m - k + i {
                self.idx[i] += 1;
                for j in i + 1..k {
                    self.idx[j] = self.idx[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{from_box, BoxSystem};

    #[test]
    fn combinations_count() {
        assert_eq!(Combinations::new(6, 3).count(), 20);
        assert_eq!(Combinations::new(3, 3).count(), 1);
        assert_eq!(Combinations::new(2, 3).count(), 0);
    }

    #[test]
    fn unit_square_tau() {
        let bx = BoxSystem {
            a_hat: DMatrix::zeros(2, 0),
            u_hat: DVector::zeros(0),
            lo: DVector::from_element(2, -1.0),
            hi: DVector::from_element(2, 1.0),
        };
        let (p, _) = from_box(&bx).unwrap();
        let t = estimate_tau(&p).unwrap();
        assert!((t.tau - 1.0).abs() < 1e-12);
        assert!(t.feasible);
        assert!(t.x.amax() < 1e-12);
    }

    #[test]
    fn infeasible_pair_tau() {
        let p =
            ProblemData::new(DMatrix::from_row_slice(1, 2, &[1.0, -1.0]), DVector::from_vec(vec![-0.5, -0.5])).unwrap();
        let t = estimate_tau(&p).unwrap();
        assert!((t.tau - 0.5).abs() < 1e-12);
        assert!(!t.feasible);
    }

    #[test]
    fn caps_enforced() {
        let p = ProblemData::new(
            DMatrix::from_fn(1, 13, |_, j| if j % 2 == 0 { 1.0 } else { -1.0 }),
            DVector::from_element(13, 1.0),
        )
        .unwrap();
        assert!(matches!(estimate_tau(&p), Err(Error::TooLarge(_))));
        assert!(estimate_tau_with(&p, TauCaps::generator(), false).is_ok());
    }
}
