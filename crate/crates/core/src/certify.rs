//! Sampling-based falsifiers for smoothness, sandwich and gradient claims.
//!
//! Every sample `i` draws from its own `ChaCha8` stream (`seed`, stream `i`),
//! so results are identical whether batches run serially or in parallel.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::aggregation::AggregateState;
use crate::error::{Error, Result};
use crate::linalg;
use crate::norm::{NormFn, RegularityCertificate, SmoothSquaredNorm};

/// Relative slack allowed before a sampled ratio counts as a violation.
pub const DOMINANCE_RTOL: f64 = 1e-8;
/// Magnitudes of `h` relative to `x`.
pub const H_SCALES: [f64; 4] = [1e-2, 1e-1, 1.0, 10.0];

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn axis(n: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[i] = 1.0;
    e
}

/// Largest value, ties broken by the lower index so parallel reductions are
/// deterministic.
fn argmax(items: Vec<(f64, usize)>) -> Option<(f64, usize)> {
    items.into_iter().fold(None, |best, (v, i)| match best {
        Some((bv, bi)) if bv > v || (bv == v && bi < i) || v.is_nan() => Some((bv, bi)),
        _ => Some((v, i)),
    })
}

/// Pairs `x = e_1 + e_2`, `h = ε(e_1 - e_2)` along which `‖·‖_p²` approaches
/// its smoothness constant `p - 1` as `ε → 0`.
pub fn lp_extremal_pairs(n: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    if n < 2 {
        return Vec::new();
    }
    [1e-1, 1e-2, 1e-3]
        .iter()
        .map(|&eps| {
            let mut x = vec![0.0; n];
            let mut h = vec![0.0; n];
            x[0] = 1.0;
            x[1] = 1.0;
            h[0] = eps;
            h[1] = -eps;
            (x, h)
        })
        .collect()
}

/// `X = diag(1, 1)`, `H = ε diag(1, -1)` padded into row-major `m × n`.
pub fn schatten_extremal_pairs(m: usize, n: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    if m < 2 || n < 2 {
        return Vec::new();
    }
    [1e-1, 1e-2, 1e-3]
        .iter()
        .map(|&eps| {
            let mut x = vec![0.0; m * n];
            let mut h = vec![0.0; m * n];
            x[0] = 1.0;
            x[n + 1] = 1.0;
            h[0] = eps;
            h[n + 1] = -eps;
            (x, h)
        })
        .collect()
}

/// Worst sampled smoothness ratios of `Φ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothnessResult {
    /// `max [Φ(x+h) - Φ(x) - ∇Φ(x)ᵀh] / ‖h‖²`.
    pub max_value_ratio: f64,
    /// `max hᵀ[∇Φ(x+h) - ∇Φ(x)] / (2‖h‖²)`.
    pub max_gradient_ratio: f64,
    pub witness_x: Vec<f64>,
    pub witness_h: Vec<f64>,
    pub pairs: usize,
}

impl SmoothnessResult {
    pub fn max_ratio(&self) -> f64 {
        self.max_value_ratio.max(self.max_gradient_ratio)
    }
}

fn smoothness_pair(
    phi: &SmoothSquaredNorm,
    h_norm: Option<&NormFn>,
    x: &[f64],
    h: &[f64],
) -> Result<(f64, f64)> {
    let hh = match h_norm {
        Some(f) => {
            let v = f(h)?;
            v * v
        }
        None => phi.eval(h)?,
    };
    if hh == 0.0 {
        return Ok((f64::NEG_INFINITY, f64::NEG_INFINITY));
    }
    let (fx, gx) = phi.eval_grad(x)?;
    let xh: Vec<f64> = x.iter().zip(h).map(|(a, b)| a + b).collect();
    let (fxh, gxh) = phi.eval_grad(&xh)?;
    let r3 = (fxh - fx - linalg::dot(&gx, h)) / hh;
    let dg: Vec<f64> = gxh.iter().zip(&gx).map(|(a, b)| a - b).collect();
    let r1 = linalg::dot(h, &dg) / (2.0 * hh);
    Ok((r3, r1))
}

/// Samples `(x, h)` pairs: Gaussian `x`, Gaussian directions for `h` scaled to
/// `{1e-2, 1e-1, 1, 10}·‖x‖`, axis and all-ones pairs, plus `extremal`.
/// `h_norm` measures `h` (default: `Φ^{1/2}` itself).
pub fn check_smoothness(
    phi: &SmoothSquaredNorm,
    h_norm: Option<&NormFn>,
    n_samples: usize,
    seed: u64,
    extremal: &[(Vec<f64>, Vec<f64>)],
) -> Result<SmoothnessResult> {
    if n_samples == 0 {
        return Err(Error::Data("at least one sample is required".into()));
    }
    let n = phi.dim();
    let mut fixed: Vec<(Vec<f64>, Vec<f64>)> = extremal.to_vec();
    let ones = vec![1.0; n];
    for &s in &H_SCALES {
        fixed.push((
            axis(n, 0),
            axis(n, n - 1).into_iter().map(|v| s * v).collect(),
        ));
        fixed.push((
            ones.clone(),
            axis(n, 0).into_iter().map(|v| s * v).collect(),
        ));
        fixed.push((axis(n, 0), ones.iter().map(|v| s * v).collect()));
    }
    let pair = |i: usize| -> (Vec<f64>, Vec<f64>) {
        if i < fixed.len() {
            return fixed[i].clone();
        }
        let mut rng = rng_for(seed, i as u64);
        let x = gaussian(&mut rng, n);
        let d = gaussian(&mut rng, n);
        let s = H_SCALES[i % H_SCALES.len()] * linalg::norm2(&x)
            / linalg::norm2(&d).max(f64::MIN_POSITIVE);
        (x, d.into_iter().map(|v| s * v).collect())
    };
    let total = fixed.len() + n_samples;
    let ratios: Vec<(f64, f64)> = (0..total)
        .into_par_iter()
        .map(|i| {
            let (x, h) = pair(i);
            smoothness_pair(phi, h_norm, &x, &h)
        })
        .collect::<Result<_>>()?;
    let (r3, i3) = argmax(ratios.iter().enumerate().map(|(i, r)| (r.0, i)).collect()).unwrap();
    let (r1, i1) = argmax(ratios.iter().enumerate().map(|(i, r)| (r.1, i)).collect()).unwrap();
    let (wx, wh) = pair(if r1 > r3 { i1 } else { i3 });
    Ok(SmoothnessResult {
        max_value_ratio: r3,
        max_gradient_ratio: r1,
        witness_x: wx,
        witness_h: wh,
        pairs: total,
    })
}

/// Worst sampled `max(a/b, b/a)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichResult {
    pub max_ratio: f64,
    pub witness: Vec<f64>,
    pub points: usize,
}

/// Compares two norms on Gaussian directions, axis vectors, the all-ones
/// vector and `extremal` points.
pub fn check_sandwich(
    norm_a: &NormFn,
    norm_b: &NormFn,
    dim: usize,
    n_samples: usize,
    seed: u64,
    extremal: &[Vec<f64>],
) -> Result<SandwichResult> {
    let mut fixed: Vec<Vec<f64>> = extremal.to_vec();
    fixed.extend((0..dim).map(|i| axis(dim, i)));
    fixed.push(vec![1.0; dim]);
    let point = |i: usize| -> Vec<f64> {
        if i < fixed.len() {
            return fixed[i].clone();
        }
        let mut rng = rng_for(seed, i as u64);
        gaussian(&mut rng, dim)
    };
    let total = fixed.len() + n_samples;
    let ratios: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|i| {
            let x = point(i);
            let a = norm_a(&x)?;
            let b = norm_b(&x)?;
            if a == 0.0 && b == 0.0 {
                return Ok(1.0);
            }
            if a <= 0.0 || b <= 0.0 {
                return Ok(f64::INFINITY);
            }
            Ok((a / b).max(b / a))
        })
        .collect::<Result<_>>()?;
    let (r, i) = argmax(
        ratios
            .into_iter()
            .enumerate()
            .map(|(i, r)| (r, i))
            .collect(),
    )
    .unwrap();
    Ok(SandwichResult {
        max_ratio: r,
        witness: point(i),
        points: total,
    })
}

/// Central-difference gradient of `Φ` with step `1e-6 (1 + ‖x‖)`.
pub fn finite_difference_grad(phi: &SmoothSquaredNorm, x: &[f64]) -> Result<Vec<f64>> {
    let h = 1e-6 * (1.0 + linalg::norm2(x));
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let fp = phi.eval(&work)?;
            work[i] = x[i] - h;
            let fm = phi.eval(&work)?;
            work[i] = x[i];
            Ok((fp - fm) / (2.0 * h))
        })
        .collect()
}

/// `‖g_fd - ∇Φ(x)‖_∞ / ‖∇Φ(x)‖_∞`, maximized over the given points.
pub fn check_gradient_at(phi: &SmoothSquaredNorm, points: &[Vec<f64>]) -> Result<f64> {
    let errs: Vec<f64> = points
        .par_iter()
        .map(|x| {
            let g = phi.grad(x)?;
            let fd = finite_difference_grad(phi, x)?;
            let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
            let scale = linalg::max_abs(&g).max(f64::MIN_POSITIVE);
            Ok(linalg::max_abs(&diff) / scale)
        })
        .collect::<Result<_>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// Gradient check at `n_points` seeded Gaussian points.
pub fn check_gradient(phi: &SmoothSquaredNorm, n_points: usize, seed: u64) -> Result<f64> {
    let points: Vec<Vec<f64>> = (0..n_points)
        .map(|i| gaussian(&mut rng_for(seed, i as u64), phi.dim()))
        .collect();
    check_gradient_at(phi, &points)
}

/// Grid minimum of `f(x, t) = Σ ω_i^{p+1}/t_i^p` over `{θ̄(t) = 1}` for `K <= 3`.
/// Directions are taken on a simplex grid of resolution `grid_res` and scaled
/// onto the constraint surface.
pub fn brute_force_phi(state: &AggregateState, x: &[f64], grid_res: f64) -> Result<f64> {
    let k = state.num_blocks();
    if k > 3 {
        return Err(Error::Scale(format!(
            "grid oracle supports K <= 3, got K = {k}"
        )));
    }
    if !(grid_res > 0.0 && grid_res <= 0.5) {
        return Err(Error::Domain(format!(
            "grid resolution {grid_res} outside (0, 0.5]"
        )));
    }
    let omega = state.block_omegas(x)?;
    if omega.iter().all(|w| *w == 0.0) {
        return Ok(0.0);
    }
    let p = state.p() as i32;
    let theta_bar = state.theta_bar();
    let f_at = |d: &[f64]| -> f64 {
        let s = theta_bar.eval_unchecked(d);
        let mut f = 0.0;
        for (w, di) in omega.iter().zip(d) {
            if *w == 0.0 {
                continue;
            }
            if *di == 0.0 {
                return f64::INFINITY;
            }
            let ti = di / s;
            f += w.powi(p + 1) / ti.powi(p);
        }
        f
    };
    let steps = (1.0 / grid_res).round() as usize;
    let best = match k {
        1 => f_at(&[1.0]),
        2 => (0..=steps)
            .into_par_iter()
            .map(|i| {
                let a = i as f64 / steps as f64;
                f_at(&[a, 1.0 - a])
            })
            .reduce(|| f64::INFINITY, f64::min),
        _ => (0..=steps)
            .into_par_iter()
            .map(|i| {
                let a = i as f64 / steps as f64;
                let mut m = f64::INFINITY;
                for j in 0..=(steps - i) {
                    let b = j as f64 / steps as f64;
                    m = m.min(f_at(&[a, b, (1.0 - a - b).max(0.0)]));
                }
                m
            })
            .reduce(|| f64::INFINITY, f64::min),
    };
    Ok(best)
}

/// One inequality check in a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub id: String,
    pub samples: usize,
    pub max_ratio: f64,
    pub bound: f64,
    pub slack: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub inequality: String,
    pub witness: Vec<f64>,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertifyReport {
    pub target: String,
    pub samples: usize,
    pub seed: u64,
    pub kappa: f64,
    pub sigma: f64,
    pub max_smoothness_ratio: f64,
    pub max_sandwich_ratio: f64,
    pub grad_fd_max_rel_err: f64,
    pub checks: Vec<CheckRow>,
    pub violations: Vec<Violation>,
    pub trace: Vec<String>,
}

impl CertifyReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Options for [`certify`].
#[derive(Debug, Clone)]
pub struct CertifyOptions {
    pub samples: usize,
    pub seed: u64,
    pub gradient_points: usize,
    pub gradient_tol: f64,
    pub smoothness_pairs: Vec<(Vec<f64>, Vec<f64>)>,
    pub sandwich_points: Vec<Vec<f64>>,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 42,
            gradient_points: 100,
            gradient_tol: 1e-5,
            smoothness_pairs: Vec::new(),
            sandwich_points: Vec::new(),
        }
    }
}

/// Checks a certificate against the norm it claims to approximate:
/// smoothness ratios against `κ`, the sandwich against `ς` and the surrogate
/// gradient against finite differences.
pub fn certify(
    target: &str,
    cert: &RegularityCertificate,
    norm: &NormFn,
    opts: &CertifyOptions,
) -> Result<CertifyReport> {
    let phi = cert.surrogate();
    let smooth = check_smoothness(phi, None, opts.samples, opts.seed, &opts.smoothness_pairs)?;
    let surrogate_norm: NormFn = {
        let phi = phi.clone();
        std::sync::Arc::new(move |x: &[f64]| phi.norm(x))
    };
    let sandwich = check_sandwich(
        norm,
        &surrogate_norm,
        phi.dim(),
        opts.samples,
        opts.seed,
        &opts.sandwich_points,
    )?;
    let grad_err = check_gradient(phi, opts.gradient_points, opts.seed)?;

    let mut checks = Vec::new();
    let mut violations = Vec::new();
    let mut row =
        |id: &str, samples: usize, ratio: f64, bound: f64, pass: bool, witness: Vec<f64>| {
            checks.push(CheckRow {
                id: id.to_string(),
                samples,
                max_ratio: ratio,
                bound,
                slack: bound - ratio,
                pass,
            });
            if !pass {
                violations.push(Violation {
                    inequality: id.to_string(),
                    witness,
                    margin: ratio - bound,
                });
            }
        };
    let kappa = cert.kappa();
    let sigma = cert.sigma();
    let tol = 1.0 + DOMINANCE_RTOL;
    let mut wx = smooth.witness_x.clone();
    wx.extend(&smooth.witness_h);
    row(
        "smoothness_value",
        smooth.pairs,
        smooth.max_value_ratio,
        kappa,
        smooth.max_value_ratio <= kappa * tol,
        wx.clone(),
    );
    row(
        "smoothness_gradient",
        smooth.pairs,
        smooth.max_gradient_ratio,
        kappa,
        smooth.max_gradient_ratio <= kappa * tol,
        wx,
    );
    row(
        "sandwich",
        sandwich.points,
        sandwich.max_ratio,
        sigma,
        sandwich.max_ratio <= sigma * tol,
        sandwich.witness.clone(),
    );
    row(
        "gradient_fd",
        opts.gradient_points,
        grad_err,
        opts.gradient_tol,
        grad_err <= opts.gradient_tol,
        Vec::new(),
    );
    Ok(CertifyReport {
        target: target.to_string(),
        samples: opts.samples,
        seed: opts.seed,
        kappa,
        sigma,
        max_smoothness_ratio: smooth.max_ratio(),
        max_sandwich_ratio: sandwich.max_ratio,
        grad_fd_max_rel_err: grad_err,
        checks,
        violations,
        trace: cert.trace(),
    })
}

/// Uniformly random orthogonal matrix (QR of a Gaussian matrix with sign fix).
pub fn random_orthogonal(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_for(seed, 0);
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}
