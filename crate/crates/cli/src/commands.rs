use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::{json, Value};

use regnorm::certify::{
    certify, lp_extremal_pairs, schatten_extremal_pairs, CertifyOptions, CertifyReport,
};
use regnorm::descriptor::NormDescriptor;
use regnorm::prox::{mirror_descent, ProxProblem, QuadraticObjective};
use regnorm::quotient::{QuotientMode, QuotientNorm};

use crate::spec::{read_csv_rows, Spec};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "regnorm",
    version,
    about = "Regular norms and their smooth surrogates"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Original,
    Surrogate,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate a norm at the rows of a CSV file, or run the spec's tasks
    /// when no norm is named.
    Eval {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        norm: Option<String>,
        #[arg(long)]
        x: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the smooth surrogate and write its constants, optionally with
    /// values and gradients at the rows of a CSV file.
    Surrogate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        norm: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        x: Option<PathBuf>,
    },
    /// Sample the smoothness, sandwich and gradient inequalities.
    Certify {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        norm: String,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        /// One row per inequality check.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Evaluate a factor norm at the rows of a CSV file.
    QuotientEval {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        norm: String,
        #[arg(long)]
        u: PathBuf,
        #[arg(long, value_enum, default_value = "original")]
        mode: ModeArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mirror descent over the surrogate unit ball across dimensions.
    ProxDemo {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        ball: String,
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 100_000)]
        max_iters: usize,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Directory for per-run `iter,gap,time_ms` CSV files.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("regnorm: {e}");
        return e.exit_code();
    }
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("regnorm: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("REGNORM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        CliError::Validation(format!(
            "REGNORM_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    // A second call within one process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

pub fn execute(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Eval { spec, norm, x, out } => {
            let spec = load(spec)?;
            match (norm, x) {
                (Some(name), Some(x)) => eval_points(&spec, name, x, out.as_deref()),
                (Some(_), None) => Err(CliError::Validation("--norm requires --x".into())),
                (None, Some(_)) => Err(CliError::Validation("--x requires --norm".into())),
                (None, None) => run_tasks(&spec, out.as_deref()),
            }
        }
        Command::Surrogate { spec, norm, out, x } => {
            surrogate(&load(spec)?, norm, out, x.as_deref())
        }
        Command::Certify {
            spec,
            norm,
            samples,
            seed,
            report,
            csv,
        } => {
            let spec = load(spec)?;
            let r = certify_named(&spec, norm, *samples, *seed)?;
            write_atomic(report, &to_json(&r)?)?;
            if let Some(path) = csv {
                write_atomic(path, &report_csv(&r)?)?;
            }
            if r.passed() {
                Ok(())
            } else {
                Err(CliError::CheckFailed(format!(
                    "{} of {} checks violated for {norm:?}",
                    r.violations.len(),
                    r.checks.len()
                )))
            }
        }
        Command::QuotientEval {
            spec,
            norm,
            u,
            mode,
            out,
        } => quotient_eval(&load(spec)?, norm, u, *mode, out.as_deref()),
        Command::ProxDemo {
            spec,
            ball,
            dims,
            seeds,
            eps,
            max_iters,
            report,
            trajectories,
        } => prox_demo(
            &load(spec)?,
            ball,
            dims,
            *seeds,
            *eps,
            *max_iters,
            report.as_deref(),
            trajectories.as_deref(),
        ),
    }
}

fn load(path: &Path) -> Result<Spec, CliError> {
    let spec = Spec::load(path)?;
    spec.validate_all()?;
    Ok(spec)
}

/// Writes through a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Validation(format!("{}: {e}", path.display()));
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::Validation(format!("stdout: {e}"))),
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_string_pretty(v)
        .map_err(|e| CliError::Validation(format!("serialization: {e}")))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn read_points(path: &Path, dim: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let rows = read_csv_rows(path)?;
    if rows.is_empty() {
        return Err(CliError::Validation(format!("{}: no rows", path.display())));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(CliError::Validation(format!(
                "{} row {}: expected {dim} values, got {}",
                path.display(),
                i + 1,
                r.len()
            )));
        }
    }
    Ok(rows)
}

fn eval_points(spec: &Spec, name: &str, x: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let d = spec.descriptor(name)?;
    let points = read_points(x, d.dim())?;
    let f = d.norm_fn()?;
    let mut s = String::from("index,norm\n");
    for (i, p) in points.iter().enumerate() {
        writeln!(s, "{i},{}", f(p)?).unwrap();
    }
    emit(out, s.as_bytes())
}

fn surrogate(spec: &Spec, name: &str, out: &Path, x: Option<&Path>) -> Result<(), CliError> {
    let d = spec.descriptor(name)?;
    let cert = d.certificate()?;
    let phi = cert.surrogate();
    let points = match x {
        Some(path) => read_points(path, d.dim())?
            .into_iter()
            .map(|p| {
                let (v, g) = phi.eval_grad(&p)?;
                Ok(json!({ "x": p, "phi": v, "grad": g }))
            })
            .collect::<Result<Vec<_>, CliError>>()?,
        None => Vec::new(),
    };
    let doc = json!({
        "target": name,
        "dim": d.dim(),
        "kappa": cert.kappa(),
        "sigma": cert.sigma(),
        "trace": cert.trace(),
        "points": points,
    });
    write_atomic(out, &to_json(&doc)?)
}

/// Known adversarial pairs for the catalog norms.
fn extremal_pairs(d: &NormDescriptor) -> Vec<(Vec<f64>, Vec<f64>)> {
    match d {
        NormDescriptor::Lp { p, n } if p.is_finite() => lp_extremal_pairs(*n),
        NormDescriptor::Schatten { p, m, n } if p.is_finite() => schatten_extremal_pairs(*m, *n),
        _ => Vec::new(),
    }
}

pub fn certify_named(
    spec: &Spec,
    name: &str,
    samples: usize,
    seed: u64,
) -> Result<CertifyReport, CliError> {
    if samples == 0 {
        return Err(CliError::Validation("--samples must be positive".into()));
    }
    let d = spec.descriptor(name)?;
    let cert = d.certificate()?;
    let norm = d.norm_fn()?;
    let opts = CertifyOptions {
        samples,
        seed,
        smoothness_pairs: extremal_pairs(&d),
        ..CertifyOptions::default()
    };
    Ok(certify(name, &cert, &norm, &opts)?)
}

pub fn report_csv(r: &CertifyReport) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &r.checks {
        w.serialize(row)
            .map_err(|e| CliError::Validation(format!("csv: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| CliError::Validation(format!("csv: {e}")))
}

fn quotient_parts(spec: &Spec, name: &str) -> Result<QuotientNorm, CliError> {
    match spec.descriptor(name)? {
        NormDescriptor::Quotient { p, child } => {
            let cert = child.certificate()?;
            Ok(QuotientNorm::new(
                p,
                cert.surrogate().clone(),
                Some(child.norm_fn()?),
            )?)
        }
        _ => Err(CliError::Validation(format!(
            "{name:?} is not a quotient descriptor"
        ))),
    }
}

fn quotient_eval(
    spec: &Spec,
    name: &str,
    u: &Path,
    mode: ModeArg,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let q = quotient_parts(spec, name)?;
    let points = read_points(u, q.matrix().nrows())?;
    let mode = match mode {
        ModeArg::Original => QuotientMode::Original,
        ModeArg::Surrogate => QuotientMode::Surrogate,
    };
    let rows = points
        .iter()
        .map(|p| {
            let sol = q.eval(p, mode)?;
            let mut row = json!({
                "u": p,
                "value": sol.value,
                "argmin": sol.argmin,
                "iterations": sol.iterations,
            });
            if matches!(mode, QuotientMode::Surrogate) {
                row["grad"] = json!(q.grad(p)?);
            }
            Ok(row)
        })
        .collect::<Result<Vec<Value>, CliError>>()?;
    emit(out, &to_json(&json!({ "target": name, "results": rows }))?)
}

#[derive(Debug, Clone, Serialize)]
pub struct ProxRun {
    pub n: usize,
    pub seed: u64,
    pub iters_to_eps: Option<usize>,
    pub final_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProxSummary {
    pub ball: String,
    pub epsilon: f64,
    pub runs: Vec<ProxRun>,
    /// `(n, mean iterations to ε)` per dimension.
    pub mean_iters: Vec<(usize, f64)>,
    /// Mean iterations at the last dimension over the first.
    pub ratio: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn prox_sweep(
    spec: &Spec,
    ball: &str,
    dims: &[usize],
    seeds: u64,
    eps: f64,
    max_iters: usize,
    trajectories: Option<&Path>,
) -> Result<ProxSummary, CliError> {
    let raw = spec.raw(ball)?;
    if dims.is_empty() || seeds == 0 {
        return Err(CliError::Validation(
            "--dims and --seeds must be non-empty".into(),
        ));
    }
    let mut runs = Vec::new();
    let mut mean_iters = Vec::new();
    for &n in dims {
        let d = match raw.with_dim(n) {
            Some(r) => r.build(&spec.base)?,
            None => {
                let d = spec.descriptor(ball)?;
                if d.dim() != n {
                    return Err(CliError::Validation(format!(
                        "ball {ball:?} has fixed dimension {}; only lp balls can be resized",
                        d.dim()
                    )));
                }
                d
            }
        };
        let dgf = d.certificate()?.surrogate().clone();
        let mut total = 0.0;
        for seed in 0..seeds {
            let objective = QuadraticObjective::family(&dgf, seed)?;
            let problem = ProxProblem::new(objective, dgf.clone(), eps)?;
            let res = mirror_descent(&problem, max_iters)?;
            if let Some(dir) = trajectories {
                let mut s = String::from("iter,gap,time_ms\n");
                for (k, (g, t)) in res.gaps.iter().zip(&res.times_ms).enumerate() {
                    writeln!(s, "{k},{g},{t}").unwrap();
                }
                write_atomic(
                    &dir.join(format!("{ball}_n{n}_seed{seed}.csv")),
                    s.as_bytes(),
                )?;
            }
            let iters = res.iters_to_eps.ok_or_else(|| {
                CliError::Numerical(format!(
                    "n = {n}, seed {seed}: gap {} > {eps} after {max_iters} iterations",
                    res.gaps.last().copied().unwrap_or(f64::NAN)
                ))
            })?;
            total += iters as f64;
            runs.push(ProxRun {
                n,
                seed,
                iters_to_eps: res.iters_to_eps,
                final_gap: *res.gaps.last().unwrap(),
            });
        }
        mean_iters.push((n, total / seeds as f64));
    }
    let first = mean_iters[0].1;
    let last = mean_iters[mean_iters.len() - 1].1;
    let ratio = if first > 0.0 { last / first } else { f64::NAN };
    Ok(ProxSummary {
        ball: ball.to_string(),
        epsilon: eps,
        runs,
        mean_iters,
        ratio,
    })
}

#[allow(clippy::too_many_arguments)]
fn prox_demo(
    spec: &Spec,
    ball: &str,
    dims: &[usize],
    seeds: u64,
    eps: f64,
    max_iters: usize,
    report: Option<&Path>,
    trajectories: Option<&Path>,
) -> Result<(), CliError> {
    let summary = prox_sweep(spec, ball, dims, seeds, eps, max_iters, trajectories)?;
    emit(report, &to_json(&summary)?)
}

fn random_points(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

fn param_f64(
    params: &serde_json::Map<String, Value>,
    key: &str,
    default: f64,
) -> Result<f64, CliError> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| CliError::Validation(format!("param {key:?} must be a number"))),
    }
}

fn param_u64(
    params: &serde_json::Map<String, Value>,
    key: &str,
    default: u64,
) -> Result<u64, CliError> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v.as_u64().ok_or_else(|| {
            CliError::Validation(format!("param {key:?} must be a non-negative integer"))
        }),
    }
}

fn check_params(params: &serde_json::Map<String, Value>, allowed: &[&str]) -> Result<(), CliError> {
    match params.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(CliError::Validation(format!("unknown param {k:?}"))),
        None => Ok(()),
    }
}

/// Runs the spec's task list. Every task runs; the first check failure
/// decides the exit code after all results are written.
pub fn run_tasks(spec: &Spec, out: Option<&Path>) -> Result<(), CliError> {
    if spec.file.tasks.is_empty() {
        return Err(CliError::Validation(
            "spec has no tasks; name a norm with --norm and --x".into(),
        ));
    }
    for (i, t) in spec.file.tasks.iter().enumerate() {
        let allowed: &[&str] = match t.op.as_str() {
            "eval" => &["x"],
            "compare" => &["other", "points", "seed", "tol"],
            "certify" => &["samples", "seed"],
            "surrogate" => &[],
            op => {
                return Err(CliError::Validation(format!("task {i}: unknown op {op:?}")));
            }
        };
        check_params(&t.params, allowed).map_err(|e| e.context(&format!("task {i}")))?;
    }
    let mut results = Vec::new();
    let mut failure = None;
    for (i, t) in spec.file.tasks.iter().enumerate() {
        let d = spec.descriptor(&t.target)?;
        let mut r = json!({ "op": t.op, "target": t.target });
        match t.op.as_str() {
            "eval" => {
                let x: Vec<f64> = t
                    .params
                    .get("x")
                    .and_then(|v| serde_json::from_value(v.clone()).ok())
                    .ok_or_else(|| {
                        CliError::Validation(format!("task {i}: eval needs numeric list \"x\""))
                    })?;
                r["value"] = json!(d.norm(&x)?);
            }
            "compare" => {
                let other = t
                    .params
                    .get("other")
                    .and_then(Value::as_str)
                    .ok_or_else(|| {
                        CliError::Validation(format!("task {i}: compare needs \"other\""))
                    })?;
                let od = spec.descriptor(other)?;
                if od.dim() != d.dim() {
                    return Err(CliError::Validation(format!(
                        "task {i}: dimensions {} and {} differ",
                        d.dim(),
                        od.dim()
                    )));
                }
                let count = param_u64(&t.params, "points", 1000)? as usize;
                let seed = param_u64(&t.params, "seed", 42)?;
                let tol = param_f64(&t.params, "tol", 1e-10)?;
                let (fa, fb) = (d.norm_fn()?, od.norm_fn()?);
                let mut worst = 0.0_f64;
                for x in random_points(d.dim(), count, seed) {
                    let (a, b) = (fa(&x)?, fb(&x)?);
                    worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE));
                }
                let pass = worst <= tol;
                r["other"] = json!(other);
                r["points"] = json!(count);
                r["max_rel_diff"] = json!(worst);
                r["tol"] = json!(tol);
                r["pass"] = json!(pass);
                if !pass && failure.is_none() {
                    failure = Some(format!(
                        "task {i}: {} vs {other} differ by {worst:e} > {tol:e}",
                        t.target
                    ));
                }
            }
            "certify" => {
                let samples = param_u64(&t.params, "samples", 10_000)? as usize;
                let seed = param_u64(&t.params, "seed", 42)?;
                let rep = certify_named(spec, &t.target, samples, seed)?;
                r["pass"] = json!(rep.passed());
                r["kappa"] = json!(rep.kappa);
                r["sigma"] = json!(rep.sigma);
                r["max_smoothness_ratio"] = json!(rep.max_smoothness_ratio);
                r["max_sandwich_ratio"] = json!(rep.max_sandwich_ratio);
                r["grad_fd_max_rel_err"] = json!(rep.grad_fd_max_rel_err);
                if !rep.passed() && failure.is_none() {
                    failure = Some(format!("task {i}: certification of {} failed", t.target));
                }
            }
            "surrogate" => {
                let cert = d.certificate()?;
                r["kappa"] = json!(cert.kappa());
                r["sigma"] = json!(cert.sigma());
            }
            _ => unreachable!("ops checked above"),
        }
        results.push(r);
    }
    emit(out, &to_json(&json!({ "results": results }))?)?;
    match failure {
        Some(m) => Err(CliError::CheckFailed(m)),
        None => Ok(()),
    }
}
