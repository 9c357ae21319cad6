use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use oea::bench::{run_algorithm, run_bench, summary_table, write_bench_csv, Algorithm, BenchConfig, Suite};
use oea::certificates::{verify_type_l, TOL_CERT};
use oea::generate::{gen_instance, GenKind, GenSpec};
use oea::io::{certificate_json, feasible_json, parse_certificate, parse_problem, parse_problem_data, status_json};
use oea::oea::{write_trace_csv, OutcomeKind, SolverConfig};
use oea::variants::{run_oea_mm_with_seq, write_sidecar};
use serde_json::json;

const EXIT_INPUT: u8 = 4;

/// Linear feasibility with certificates of infeasibility.
#[derive(Parser, Debug)]
#[command(name = "oea", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Solve a problem file; prints a feasible point or a certificate.
    Solve(SolveArgs),
    /// Re-verify a certificate file against a problem file.
    Certify {
        /// Problem JSON.
        problem: PathBuf,
        /// Certificate JSON as written by `solve`.
        certificate: PathBuf,
        #[arg(long, default_value_t = TOL_CERT)]
        tol: f64,
    },
    /// Write a generated instance as problem JSON.
    Generate {
        #[arg(long, value_parser = parse_kind)]
        kind: GenKind,
        #[arg(long)]
        n: usize,
        /// General cuts, or opposing pairs for infeasible-shifted.
        #[arg(long, default_value_t = 0)]
        m_hat: usize,
        #[arg(long)]
        gap: Option<f64>,
        #[arg(long)]
        pad: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file (stdout when absent).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Sweep a seeded suite over one or more algorithms.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SolverArgs {
    #[arg(long)]
    tol_feas: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Known condition measure; only adds the potential column to traces.
    #[arg(long)]
    tau: Option<f64>,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        let mut cfg = SolverConfig { max_iter: self.max_iter, tau_hint: self.tau, ..Default::default() };
        if let Some(t) = self.tol_feas {
            cfg.tol_feas = t;
        }
        cfg
    }
}

#[derive(Args, Debug)]
struct SolveArgs {
    /// Problem JSON.
    input: PathBuf,
    #[arg(long, default_value = "oea", value_parser = parse_algorithm)]
    algorithm: Algorithm,
    #[command(flatten)]
    solver: SolverArgs,
    /// Per-iteration trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Binary certificate-index sequence (oea-mm only).
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value = "feasible", value_parser = parse_suite)]
    suite: Suite,
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Comma-separated algorithm names.
    #[arg(long, default_value = "oea,seap", value_delimiter = ',', value_parser = parse_algorithm)]
    algorithm: Vec<Algorithm>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    solver: SolverArgs,
    /// Row-per-run CSV report.
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
    /// Markdown summary tables (defaults to the CSV path with `.md`).
    #[arg(long)]
    summary: Option<PathBuf>,
}

fn parse_algorithm(s: &str) -> std::result::Result<Algorithm, String> {
    s.parse().map_err(|e: oea::Error| e.to_string())
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    s.parse().map_err(|e: oea::Error| e.to_string())
}

fn parse_kind(s: &str) -> std::result::Result<GenKind, String> {
    s.parse().map_err(|e: oea::Error| e.to_string())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn emit(doc: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{doc}")?;
    out.flush()?;
    Ok(())
}

fn solve(args: &SolveArgs) -> Result<u8> {
    let inst = parse_problem(&read(&args.input)?).with_context(|| format!("loading {}", args.input.display()))?;
    let cfg = args.solver.config();
    if args.sidecar.is_some() && args.algorithm != Algorithm::OeaMm {
        anyhow::bail!("--sidecar needs --algorithm oea-mm");
    }
    let out = match (&args.sidecar, args.algorithm) {
        (Some(path), Algorithm::OeaMm) => {
            let (out, seq) = run_oea_mm_with_seq(&inst, &cfg, &mut oea::oea::NoHooks)?;
            let mut w = create(path)?;
            write_sidecar(&seq, &mut w)?;
            w.flush()?;
            out
        }
        _ => run_algorithm(args.algorithm, &inst, &cfg)?,
    };
    if let Some(path) = &args.trace {
        let mut w = create(path)?;
        write_trace_csv(&mut w, &out.trace)?;
        w.flush()?;
    }
    log::info!("{} after {} iterations ({:?})", out.kind.label(), out.iterations, out.side_iterations);
    let doc = match &out.kind {
        OutcomeKind::Feasible(x) => feasible_json(x)?,
        OutcomeKind::InfeasibleTypeL(c) => certificate_json(c)?,
        OutcomeKind::InfeasibleDeclared => status_json("infeasible-declared")?,
        OutcomeKind::IterLimit => status_json("iteration-limit")?,
    };
    emit(&doc)?;
    Ok(out.kind.exit_code() as u8)
}

fn certify(problem: &Path, certificate: &Path, tol: f64) -> Result<u8> {
    let p = parse_problem_data(&read(problem)?).with_context(|| format!("loading {}", problem.display()))?;
    let lambda = parse_certificate(&read(certificate)?).with_context(|| format!("loading {}", certificate.display()))?;
    let rep = verify_type_l(&p, &lambda, tol)?;
    emit(&serde_json::to_string(&json!({
        "status": if rep.pass { "valid" } else { "invalid" },
        "residuals": { "eq": rep.eq_residual, "min_entry": rep.min_entry, "u_dot": rep.u_dot },
    }))?)?;
    Ok(if rep.pass { 0 } else { 1 })
}

fn generate(spec: &GenSpec, output: Option<&Path>) -> Result<u8> {
    let inst = gen_instance(spec)?;
    let text = oea::io::serialize_instance(&inst)?;
    match output {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{text}")?;
            w.flush()?;
            emit(&serde_json::to_string(&json!({
                "status": "ok",
                "path": path.display().to_string(),
                "m": inst.problem.m(),
                "meta": { "tau": inst.meta.tau, "feasible": inst.meta.feasible },
            }))?)?;
        }
        None => emit(&text)?,
    }
    Ok(0)
}

fn bench(args: &BenchArgs) -> Result<u8> {
    let cfg = BenchConfig {
        suite: args.suite,
        count: args.count,
        seed: args.seed,
        algorithms: args.algorithm.clone(),
        workers: args.workers,
        solver: args.solver.config(),
    };
    let rows = run_bench(&cfg)?;
    let mut w = create(&args.out)?;
    write_bench_csv(&mut w, &rows)?;
    w.flush()?;
    let summary_path = args.summary.clone().unwrap_or_else(|| args.out.with_extension("md"));
    let table = summary_table(&rows);
    std::fs::write(&summary_path, &table).with_context(|| format!("writing {}", summary_path.display()))?;
    eprint!("{table}");
    let errors = rows.iter().filter(|r| r.error.is_some()).count();
    emit(&serde_json::to_string(&json!({
        "status": "ok",
        "rows": rows.len(),
        "errors": errors,
        "bound_violations": rows.iter().filter(|r| r.bound_satisfied == Some(false)).count(),
        "volume_violations": rows.iter().map(|r| r.volume_violations).sum::<usize>(),
        "phi_violations": rows.iter().map(|r| r.phi_violations).sum::<usize>(),
        "csv": args.out.display().to_string(),
        "summary": summary_path.display().to_string(),
    }))?)?;
    Ok(0)
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Solve(args) => solve(&args),
        Cmd::Certify { problem, certificate, tol } => certify(&problem, &certificate, tol),
        Cmd::Generate { kind, n, m_hat, gap, pad, seed, output } => {
            generate(&GenSpec { kind, n, m_hat, gap, pad, seed }, output.as_deref())
        }
        Cmd::Bench(args) => bench(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}
