//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (bypassing the harness capture) before asserting.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regnorm::aggregation::{aggregate_absolute, aggregate_general, default_theta_certificate};
use regnorm::catalog::{lp_certificate, lp_norm, schatten_certificate};
use regnorm::certify::{
    brute_force_phi, check_gradient, check_smoothness, lp_extremal_pairs, schatten_extremal_pairs,
    DOMINANCE_RTOL,
};
use regnorm::geometry::Ellitope;
use regnorm::norm::{aggregate_absolute_constants, NormFn};
use regnorm::quotient::{quotient_certificate, QuotientMode, QuotientNorm};
use regnorm::theta::theta_lq;
use regnorm::RegularityCertificate;
use regnorm_cli::commands::{certify_named, prox_sweep};
use regnorm_cli::spec::Spec;

fn report(id: u32, ok: bool, detail: String) {
    let line = format!(
        "acceptance criterion {id}: {} ({detail})\n",
        if ok { "PASS" } else { "FAIL" }
    );
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert!(ok, "criterion {id} failed: {detail}");
}

fn specs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs")
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-r..r)).collect()
}

fn central_fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-6 * (1.0 + x.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

fn rel_inf(g: &[f64], fd: &[f64]) -> f64 {
    let scale = g
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    g.iter()
        .zip(fd)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

#[test]
fn criterion_1_phi_matches_grid_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let k = rng.random_range(1..=3usize);
        let kids: Vec<RegularityCertificate> = (0..k)
            .map(|_| {
                let p = [2.0, 3.0, 4.0][rng.random_range(0..3)];
                lp_certificate(p, rng.random_range(1..=3)).unwrap()
            })
            .collect();
        let q = [1.0, 1.5, 2.0, 3.0][rng.random_range(0..4)];
        let p = rng.random_range(1..=2u32);
        let (state, _) = aggregate_general(&theta_lq(q, k).unwrap(), &kids, Some(p)).unwrap();
        let x = uniform(&mut rng, state.layout().total_dim(), 2.0);
        let exact = state.phi_eval(&x).unwrap();
        let grid = brute_force_phi(&state, &x, 1e-3).unwrap();
        worst = worst.max((exact - grid).abs() / exact.abs().max(f64::MIN_POSITIVE));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        worst <= 5e-3 && secs <= 60.0,
        format!("max rel err {worst:.2e} over 20 instances, {secs:.1} s"),
    );
}

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let mut errs = Vec::new();
    for p in [3.0, 4.0, 6.0] {
        let c = lp_certificate(p, 7).unwrap();
        errs.push((
            format!("l{p}"),
            check_gradient(c.surrogate(), 100, 2).unwrap(),
        ));
    }
    let s = schatten_certificate(4.0, 3, 4).unwrap();
    errs.push((
        "schatten4".into(),
        check_gradient(s.surrogate(), 100, 2).unwrap(),
    ));

    let theta = theta_lq(2.0, 3).unwrap();
    let kids = [
        lp_certificate(2.0, 2).unwrap(),
        lp_certificate(4.0, 3).unwrap(),
        lp_certificate(3.0, 2).unwrap(),
    ];
    let (state, agg) = aggregate_general(&theta, &kids, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut phi_err = 0.0_f64;
    let mut used = 0;
    while used < 100 {
        let x = uniform(&mut rng, state.layout().total_dim(), 2.0);
        // skip points near a vanishing block
        if state.block_omegas(&x).unwrap().iter().any(|w| *w < 1e-3) {
            continue;
        }
        let g = state.phi_grad(&x).unwrap();
        let fd = central_fd(&|y| state.phi_eval(y).unwrap(), &x);
        phi_err = phi_err.max(rel_inf(&g, &fd));
        used += 1;
    }
    errs.push(("phi".into(), phi_err));
    errs.push((
        "Phi".into(),
        check_gradient(agg.surrogate(), 100, 2).unwrap(),
    ));

    let pm = DMatrix::from_row_slice(2, 4, &[1.0, 0.5, 0.0, -1.0, 0.0, 1.0, 2.0, 0.5]);
    let qc = quotient_certificate(&lp_certificate(4.0, 4).unwrap(), &pm).unwrap();
    errs.push((
        "quotient".into(),
        check_gradient(qc.surrogate(), 100, 2).unwrap(),
    ));

    let worst = errs.iter().fold(0.0_f64, |m, (_, e)| m.max(*e));
    let detail = errs
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(2, worst <= 1e-5, detail);
}

#[test]
fn criterion_3_shipped_descriptors_dominate() {
    let spec = Spec::load(&specs_dir().join("suite.json")).unwrap();
    let names: Vec<String> = spec.file.norms.keys().cloned().collect();
    let mut failures = Vec::new();
    for name in &names {
        let r = certify_named(&spec, name, 10_000, 42).unwrap();
        // ratios are compared up to floating-point rounding of the solves
        let tol = 1.0 + DOMINANCE_RTOL;
        let ok = r.passed()
            && r.max_smoothness_ratio <= r.kappa * tol
            && r.max_sandwich_ratio <= r.sigma * tol;
        if !ok {
            failures.push(format!(
                "{name}: smooth {} / {}, sandwich {} / {}",
                r.max_smoothness_ratio, r.kappa, r.max_sandwich_ratio, r.sigma
            ));
        }
    }
    report(
        3,
        names.len() == 8 && failures.is_empty(),
        format!("{} descriptors, violations: {:?}", names.len(), failures),
    );
}

#[test]
fn criterion_4_known_smoothness_constants() {
    let l4 = lp_certificate(4.0, 10).unwrap();
    let a = check_smoothness(l4.surrogate(), None, 10_000, 42, &lp_extremal_pairs(10))
        .unwrap()
        .max_ratio();
    let s4 = schatten_certificate(4.0, 5, 5).unwrap();
    let b = check_smoothness(
        s4.surrogate(),
        None,
        10_000,
        42,
        &schatten_extremal_pairs(5, 5),
    )
    .unwrap()
    .max_ratio();
    let range = 2.5..=3.000001;
    report(
        4,
        range.contains(&a) && range.contains(&b),
        format!("l4 on R^10 {a:.6}, schatten4 on 5x5 {b:.6}"),
    );
}

#[test]
fn criterion_5_absolute_rule_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta = theta_lq(2.0, 3).unwrap();
    let base_theta = default_theta_certificate(&theta).unwrap();
    let mut mismatches = 0;
    for _ in 0..10 {
        let (tk, ts) = (rng.random_range(1.0..20.0), rng.random_range(1.0..5.0));
        let tc =
            RegularityCertificate::given(base_theta.surrogate().inner().clone(), "theta", tk, ts)
                .unwrap();
        let kids: Vec<RegularityCertificate> = (0..3)
            .map(|i| {
                let inner = lp_certificate(2.0, i + 1)
                    .unwrap()
                    .surrogate()
                    .inner()
                    .clone();
                let (k, s) = (rng.random_range(1.0..20.0), rng.random_range(1.0..5.0));
                RegularityCertificate::given(inner, "child", k, s).unwrap()
            })
            .collect();
        let ck = kids.iter().map(|c| c.kappa()).fold(1.0, f64::max);
        let cs = kids.iter().map(|c| c.sigma()).fold(1.0, f64::max);
        let (_, cert) = aggregate_absolute(&theta, &tc, &kids).unwrap();
        let expected = (2.0 * tk + ck, cs * ts.sqrt());
        let direct = aggregate_absolute_constants(tk, ts, ck, cs);
        let replay = cert.derivation().replay();
        if (cert.kappa(), cert.sigma()) != expected || direct != expected || replay != expected {
            mismatches += 1;
        }
    }
    report(
        5,
        mismatches == 0,
        format!("{mismatches} of 10 tuples differ"),
    );
}

#[test]
fn criterion_6_lp_ball_ellitope() {
    let n = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let projectors: Vec<DMatrix<f64>> = (0..n)
        .map(|i| {
            let mut t = DMatrix::zeros(n, n);
            t[(i, i)] = 1.0;
            t
        })
        .collect();
    let mut worst = 0.0_f64;
    for p in [2.0, 4.0, 6.0] {
        let e = Ellitope::new(projectors.clone(), theta_lq(p / 2.0, n).unwrap(), None).unwrap();
        for _ in 0..1000 {
            let x = uniform(&mut rng, n, 3.0);
            let want = lp_norm(p, &x);
            worst = worst.max((e.norm(&x).unwrap() - want).abs() / want);
        }
    }
    report(6, worst <= 1e-10, format!("max rel err {worst:.2e}"));
}

fn lp_quotient(p: f64, pm: DMatrix<f64>) -> QuotientNorm {
    let cert = lp_certificate(p, pm.ncols()).unwrap();
    let exact: NormFn = Arc::new(move |x: &[f64]| Ok(lp_norm(p, x)));
    QuotientNorm::new(pm, cert.surrogate().clone(), Some(exact)).unwrap()
}

/// Refined 2-D grid over the fiber `x₀ + Nz`.
fn grid_oracle(q: &QuotientNorm, u: &[f64], p: f64) -> f64 {
    let x0 = q.lift(u).unwrap();
    let null = q.nullspace_basis().clone();
    assert_eq!(null.ncols(), 2);
    let eval = |z0: f64, z1: f64| {
        let x: Vec<f64> = (0..x0.len())
            .map(|i| x0[i] + null[(i, 0)] * z0 + null[(i, 1)] * z1)
            .collect();
        lp_norm(p, &x)
    };
    let (mut c0, mut c1) = (0.0, 0.0);
    let mut radius = 4.0 * x0.iter().map(|v| v.abs()).sum::<f64>();
    let steps = 200;
    let mut best = eval(0.0, 0.0);
    for _ in 0..6 {
        let (mut b0, mut b1) = (c0, c1);
        for i in 0..=steps {
            for j in 0..=steps {
                let z0 = c0 - radius + 2.0 * radius * i as f64 / steps as f64;
                let z1 = c1 - radius + 2.0 * radius * j as f64 / steps as f64;
                let v = eval(z0, z1);
                if v < best {
                    (best, b0, b1) = (v, z0, z1);
                }
            }
        }
        (c0, c1) = (b0, b1);
        radius *= 0.05;
    }
    best
}

#[test]
fn criterion_7_quotient_correctness() {
    let pm = DMatrix::from_row_slice(2, 4, &[1.0, 0.5, 0.0, -1.0, 0.0, 1.0, 2.0, 0.5]);
    let q2 = lp_quotient(2.0, pm.clone());
    let gram = &pm * pm.transpose();
    let mut closed = 0.0_f64;
    for u in [[1.0, 2.0], [-0.5, 0.25], [3.0, -4.0]] {
        let uv = DVector::from_column_slice(&u);
        let w = gram.clone().lu().solve(&uv).unwrap();
        let value = uv.dot(&w).sqrt();
        let argmin = pm.transpose() * &w;
        for mode in [QuotientMode::Surrogate, QuotientMode::Original] {
            let sol = q2.eval(&u, mode).unwrap();
            closed = closed.max((sol.value - value).abs() / value);
            for (a, b) in sol.argmin.iter().zip(argmin.iter()) {
                closed = closed.max((a - b).abs() / (1.0 + value));
            }
        }
        let g = q2.grad(&u).unwrap();
        for (a, b) in g.iter().zip(w.iter()) {
            closed = closed.max((a - 2.0 * b).abs() / (1.0 + b.abs()));
        }
    }

    let q4 = lp_quotient(4.0, DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -0.5]));
    let mut grid = 0.0_f64;
    for u in [1.0, -2.5, 0.3] {
        let oracle = grid_oracle(&q4, &[u], 4.0);
        let v = q4.eval(&[u], QuotientMode::Original).unwrap().value;
        grid = grid.max((v - oracle).abs() / oracle);
    }
    report(
        7,
        closed <= 1e-8 && grid <= 1e-3,
        format!("l2 closed-form err {closed:.1e}, l4 grid rel err {grid:.1e}"),
    );
}

#[test]
fn criterion_8_prox_iterations_scale_mildly() {
    let spec = Spec::load(&specs_dir().join("prox.json")).unwrap();
    let s = prox_sweep(&spec, "l4", &[16, 256], 5, 1e-3, 100_000, None).unwrap();
    let all_converged = s.runs.iter().all(|r| r.iters_to_eps.is_some());
    report(
        8,
        all_converged && s.ratio <= 3.0,
        format!("mean iterations {:?}, ratio {:.3}", s.mean_iters, s.ratio),
    );
}

fn certify_bytes(dir: &Path, tag: &str, threads: &str) -> (Vec<u8>, Vec<u8>) {
    let report = dir.join(format!("{tag}.json"));
    let csv = dir.join(format!("{tag}.csv"));
    let status = Command::new(env!("CARGO_BIN_EXE_regnorm"))
        .env("REGNORM_THREADS", threads)
        .args(["certify", "--spec"])
        .arg(specs_dir().join("suite.json"))
        .args([
            "--norm",
            "agg_l3_mixed",
            "--samples",
            "3000",
            "--seed",
            "42",
            "--report",
        ])
        .arg(&report)
        .arg("--csv")
        .arg(&csv)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    (std::fs::read(report).unwrap(), std::fs::read(csv).unwrap())
}

#[test]
fn criterion_9_certify_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = certify_bytes(dir.path(), "a", "1");
    let b = certify_bytes(dir.path(), "b", "4");
    report(
        9,
        a == b && !a.0.is_empty(),
        format!("report {} bytes, csv {} bytes", a.0.len(), a.1.len()),
    );
}
