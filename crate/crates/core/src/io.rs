//! JSON problem and result files.

use std::io;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;

use crate::certificates::{TypeLCertificate, TypeLReport};
use crate::error::{Error, Result};
use crate::problem::{
    normalize_columns, normalize_with_bounds, verify_certified_bounds, BoxSystem, CertifiedBounds, Instance,
    InstanceMeta, ProblemData,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxFile {
    #[serde(rename = "A_hat")]
    a_hat: Vec<Vec<f64>>,
    u_hat: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    a: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    u: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    l: Option<Vec<f64>>,
    #[serde(rename = "Lambda", default, skip_serializing_if = "Option::is_none")]
    lambda: Option<Vec<Vec<f64>>>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    bx: Option<BoxFile>,
    #[serde(default, skip_serializing_if = "is_empty_meta")]
    meta: Option<InstanceMeta>,
}

fn is_empty_meta(m: &Option<InstanceMeta>) -> bool {
    m.as_ref().map_or(true, |m| *m == InstanceMeta::default())
}

/// Writes every float with 17 significant digits.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullPrecision;

impl Formatter for FullPrecision {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }
}

/// Serializes to a single-line JSON document using [`FullPrecision`].
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FullPrecision);
    value.serialize(&mut ser).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

fn parse_err(e: serde_json::Error) -> Error {
    Error::Parse(format!("line {}, column {}: {e}", e.line(), e.column()))
}

fn columns(field: &str, cols: &[Vec<f64>], rows: usize) -> Result<DMatrix<f64>> {
    for (j, c) in cols.iter().enumerate() {
        if c.len() != rows {
            return Err(Error::Parse(format!("{field}[{j}] has length {}, expected {rows}", c.len())));
        }
        if c.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse(format!("{field}[{j}] has a non-finite entry")));
        }
    }
    Ok(DMatrix::from_iterator(rows, cols.len(), cols.iter().flatten().copied()))
}

fn vector(field: &str, v: &[f64], len: usize) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(Error::Parse(format!("{field} has length {}, expected {len}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

fn cols_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

enum Parsed {
    Box(BoxSystem, Option<InstanceMeta>),
    Plain { a: DMatrix<f64>, u: DVector<f64>, bounds: Option<CertifiedBounds>, meta: Option<InstanceMeta> },
}

fn parse_file(text: &str) -> Result<Parsed> {
    let f: ProblemFile = serde_json::from_str(text).map_err(parse_err)?;
    if f.version != FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported version {}", f.version)));
    }
    if let Some(bx) = f.bx {
        if f.a.is_some() || f.u.is_some() || f.l.is_some() || f.lambda.is_some() {
            return Err(Error::Parse("\"box\" excludes \"A\", \"u\", \"l\" and \"Lambda\"".into()));
        }
        let n = f.n.unwrap_or(bx.lo.len());
        let a_hat = columns("box.A_hat", &bx.a_hat, n)?;
        let sys = BoxSystem {
            u_hat: vector("box.u_hat", &bx.u_hat, a_hat.ncols())?,
            lo: vector("box.lo", &bx.lo, n)?,
            hi: vector("box.hi", &bx.hi, n)?,
            a_hat,
        };
        if let Some(m) = f.m {
            if m != sys.m_hat() + 2 * n {
                return Err(Error::Parse(format!("m = {m} does not match the expanded box system")));
            }
        }
        return Ok(Parsed::Box(sys, f.meta));
    }
    let cols = f.a.ok_or_else(|| Error::Parse("missing \"A\" (or \"box\")".into()))?;
    let n = match f.n {
        Some(n) => n,
        None => cols.first().map(Vec::len).ok_or_else(|| Error::Parse("\"A\" is empty".into()))?,
    };
    let m = f.m.unwrap_or(cols.len());
    if cols.len() != m {
        return Err(Error::Parse(format!("\"A\" has {} columns, expected m = {m}", cols.len())));
    }
    let a = columns("A", &cols, n)?;
    let u = vector("u", f.u.as_deref().ok_or_else(|| Error::Parse("missing \"u\"".into()))?, m)?;
    let bounds = match (f.l, f.lambda) {
        (Some(l), Some(lam)) => Some(CertifiedBounds { l: vector("l", &l, m)?, lambda: columns("Lambda", &lam, m)? }),
        (None, None) => None,
        _ => return Err(Error::Parse("\"l\" and \"Lambda\" must be given together".into())),
    };
    Ok(Parsed::Plain { a, u, bounds, meta: f.meta })
}

/// Parses a problem file into a solvable instance (normalized, bounds verified).
pub fn parse_problem(text: &str) -> Result<Instance> {
    match parse_file(text)? {
        Parsed::Box(sys, meta) => Ok(Instance::from_box(sys)?.with_meta(meta.unwrap_or_default())),
        Parsed::Plain { a, u, bounds, meta } => {
            let bounds = bounds.ok_or_else(|| {
                Error::Parse("solving needs certified bounds: give \"l\" and \"Lambda\", or a \"box\"".into())
            })?;
            let (p, b) = normalize_with_bounds(&a, &u, &bounds)?;
            let rep = verify_certified_bounds(&p, &b, 1e-8)?;
            if !rep.pass {
                return Err(Error::InvariantViolation(format!(
                    "certified bounds fail: max |AΛ + A| = {:e}, min Λ entry = {:e}, min slack -Λ^T u - l = {:e}",
                    rep.eq_residual, rep.min_entry, rep.min_slack
                )));
            }
            Ok(Instance::new(p, b).with_meta(meta.unwrap_or_default()))
        }
    }
}

/// Parses only `(A, u)`, normalized; bounds may be absent.
pub fn parse_problem_data(text: &str) -> Result<ProblemData> {
    match parse_file(text)? {
        Parsed::Box(sys, _) => Ok(Instance::from_box(sys)?.problem),
        Parsed::Plain { a, u, .. } => normalize_columns(&a, &u),
    }
}

/// Serializes an instance; box-built instances keep the box form.
pub fn serialize_instance(inst: &Instance) -> Result<String> {
    let meta = Some(inst.meta.clone());
    let f = match &inst.source_box {
        Some(bx) => ProblemFile {
            version: FORMAT_VERSION,
            n: Some(bx.n()),
            m: Some(inst.problem.m()),
            a: None,
            u: None,
            l: None,
            lambda: None,
            bx: Some(BoxFile {
                a_hat: cols_of(&bx.a_hat),
                u_hat: bx.u_hat.iter().copied().collect(),
                lo: bx.lo.iter().copied().collect(),
                hi: bx.hi.iter().copied().collect(),
            }),
            meta,
        },
        None => ProblemFile {
            version: FORMAT_VERSION,
            n: Some(inst.problem.n()),
            m: Some(inst.problem.m()),
            a: Some(cols_of(inst.problem.a())),
            u: Some(inst.problem.u().iter().copied().collect()),
            l: Some(inst.bounds.l.iter().copied().collect()),
            lambda: Some(cols_of(&inst.bounds.lambda)),
            bx: None,
            meta,
        },
    };
    to_json(&f)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CertificateFile {
    status: String,
    lambda_bar: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    residuals: Option<TypeLReport>,
}

pub fn certificate_json(c: &TypeLCertificate) -> Result<String> {
    to_json(&CertificateFile {
        status: "infeasible".into(),
        lambda_bar: c.lambda_bar.iter().copied().collect(),
        residuals: Some(c.report()),
    })
}

/// Reads `lambda_bar` from a certificate file; the stored residuals are ignored.
pub fn parse_certificate(text: &str) -> Result<DVector<f64>> {
    let f: CertificateFile = serde_json::from_str(text).map_err(parse_err)?;
    if f.status != "infeasible" {
        return Err(Error::Parse(format!("status {:?} is not a certificate", f.status)));
    }
    Ok(DVector::from_vec(f.lambda_bar))
}

pub fn feasible_json(x: &DVector<f64>) -> Result<String> {
    #[derive(Serialize)]
    struct F<'a> {
        status: &'static str,
        x: &'a [f64],
    }
    to_json(&F { status: "feasible", x: x.as_slice() })
}

pub fn status_json(status: &str) -> Result<String> {
    #[derive(Serialize)]
    struct S<'a> {
        status: &'a str,
    }
    to_json(&S { status })
}
