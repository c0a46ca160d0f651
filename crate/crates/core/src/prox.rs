//! Mirror descent over the unit ball of a surrogate norm `𝔫 = Φ^{1/2}`, with
//! `Φ` as the distance-generating function.
//!
//! The prox step `argmin_{𝔫(x) <= 1} ⟨γg - ∇Φ(x_k), x⟩ + Φ(x)` is solved
//! without constraints first; by homogeneity of `Φ` the constrained solution
//! is the unconstrained one scaled back onto the sphere when it falls outside.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::norm::SmoothSquaredNorm;

const INNER_MAX_ITERS: usize = 10_000;
const FEASIBILITY_TOL: f64 = 1e-9;

/// `f(x) = (s/2) Σ w_j (x_j - c_j)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    pub weights: Vec<f64>,
    pub center: Vec<f64>,
    pub scale: f64,
}

impl QuadraticObjective {
    pub fn new(weights: Vec<f64>, center: Vec<f64>, scale: f64) -> Result<Self> {
        if weights.len() != center.len() || weights.is_empty() {
            return Err(Error::Data(
                "weights and center must have the same positive length".into(),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || !(scale.is_finite() && scale >= 0.0)
        {
            return Err(Error::Domain(
                "weights and scale must be finite and >= 0".into(),
            ));
        }
        Ok(Self {
            weights,
            center,
            scale,
        })
    }

    /// Zero objective on `ℝⁿ`.
    pub fn zero(n: usize) -> Self {
        Self {
            weights: vec![0.0; n],
            center: vec![0.0; n],
            scale: 0.0,
        }
    }

    /// Shipped family on `ℝⁿ`: weights uniform in `[0.5, 1]`, scale `1/√n`
    /// (so for the `ℓ_4` ball the gradient Lipschitz constant from `ℓ_4` to
    /// `ℓ_{4/3}` stays below one in every dimension) and a Gaussian center
    /// rescaled to ball norm `1/2`.
    pub fn family(ball: &SmoothSquaredNorm, seed: u64) -> Result<Self> {
        let n = ball.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..n).map(|_| rng.random_range(0.5..1.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let r = ball.norm(&g)?;
        if !(r > 0.0) {
            return Err(Error::Numerical("degenerate center draw".into()));
        }
        let center = g.into_iter().map(|v| 0.5 * v / r).collect();
        Ok(Self {
            weights,
            center,
            scale: 1.0 / (n as f64).sqrt(),
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        0.5 * self.scale
            * self
                .weights
                .iter()
                .zip(x.iter().zip(&self.center))
                .map(|(w, (xi, ci))| w * (xi - ci) * (xi - ci))
                .sum::<f64>()
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(x.iter().zip(&self.center))
            .map(|(w, (xi, ci))| self.scale * w * (xi - ci))
            .collect()
    }

    /// Euclidean Lipschitz constant of the gradient.
    pub fn lipschitz(&self) -> f64 {
        self.scale * self.weights.iter().fold(0.0_f64, |m, w| m.max(*w))
    }
}

#[derive(Debug, Clone)]
pub struct ProxProblem {
    pub objective: QuadraticObjective,
    pub dgf: SmoothSquaredNorm,
    pub epsilon: f64,
    /// Step `γ_k = step0 / √(k+1)`.
    pub step0: f64,
    /// Optimal value over the ball.
    pub f_star: f64,
}

impl ProxProblem {
    /// Problem whose minimizer `c` lies inside the ball, so `f* = 0`. The
    /// initial step is `√(2/κ) / G` with `G = ‖∇f(0)‖_*` in the norm dual to
    /// the ball's: the dgf has range one on the ball, and `1/κ` is the
    /// strong-convexity modulus of the conjugate of a `κ`-smooth square.
    pub fn new(
        objective: QuadraticObjective,
        dgf: SmoothSquaredNorm,
        epsilon: f64,
    ) -> Result<Self> {
        if objective.dim() != dgf.dim() {
            return Err(Error::Data(format!(
                "objective on R^{}, ball on R^{}",
                objective.dim(),
                dgf.dim()
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Domain("target accuracy must be positive".into()));
        }
        if dgf.norm(&objective.center)? > 1.0 {
            return Err(Error::Domain(
                "objective minimizer must lie in the ball".into(),
            ));
        }
        let g = dual_norm(&dgf, &objective.grad(&vec![0.0; objective.dim()]))?;
        let step0 = if g > 0.0 {
            (2.0 / dgf.kappa()).sqrt() / g
        } else {
            1.0
        };
        Ok(Self {
            objective,
            dgf,
            epsilon,
            step0,
            f_star: 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MirrorDescentResult {
    /// `f(x_k) - f*` for `k = 0, 1, ...`.
    pub gaps: Vec<f64>,
    pub best_gaps: Vec<f64>,
    pub times_ms: Vec<f64>,
    /// First `k` with `f(x_k) - f* <= ε`.
    pub iters_to_eps: Option<usize>,
    pub final_point: Vec<f64>,
}

/// `argmin ⟨c, x⟩ + Φ(x)` over `ℝⁿ`.
fn unconstrained_prox(dgf: &SmoothSquaredNorm, c: &[f64]) -> Result<Vec<f64>> {
    if let Some(x) = dgf.linear_prox(c) {
        return Ok(x);
    }
    let tol = 1e-12 * (1.0 + linalg::norm2(c));
    let obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (v, g) = dgf.eval_grad(x)?;
        Ok((
            v + linalg::dot(c, x),
            g.iter().zip(c).map(|(a, b)| a + b).collect(),
        ))
    };
    let mut x = vec![0.0; c.len()];
    let (mut f, mut g) = obj(&x)?;
    let mut step = 0.5;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    for _ in 0..INNER_MAX_ITERS {
        if linalg::norm2(&g) <= tol {
            return Ok(x);
        }
        if let Some((px, pg)) = &prev {
            let s: Vec<f64> = x.iter().zip(px).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g.iter().zip(pg).map(|(a, b)| a - b).collect();
            let sy = linalg::dot(&s, &y);
            if sy > 0.0 {
                step = linalg::dot(&s, &s) / sy;
            }
        }
        let gg = linalg::dot(&g, &g);
        let mut moved = false;
        for _ in 0..60 {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let (fc, gc) = obj(&cand)?;
            if fc <= f - 1e-4 * step * gg {
                prev = Some((
                    std::mem::replace(&mut x, cand),
                    std::mem::replace(&mut g, gc),
                ));
                f = fc;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let gn = linalg::norm2(&g);
    if gn <= 1e3 * tol {
        return Ok(x);
    }
    Err(Error::Convergence {
        what: "prox-mapping inner solve",
        iterations: INNER_MAX_ITERS,
        residual: gn,
    })
}

/// `‖g‖_* = sup{gᵀx : 𝔫(x) <= 1}`, from `‖g‖_*²/4 = sup gᵀx - Φ(x)`.
pub fn dual_norm(dgf: &SmoothSquaredNorm, g: &[f64]) -> Result<f64> {
    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
    let x = unconstrained_prox(dgf, &neg)?;
    let v = linalg::dot(g, &x) - dgf.eval(&x)?;
    Ok(2.0 * v.max(0.0).sqrt())
}

/// One prox step `argmin_{𝔫(x) <= 1} γgᵀx + Φ(x) - Φ(x_k) - ∇Φ(x_k)ᵀ(x - x_k)`.
pub fn prox_step(dgf: &SmoothSquaredNorm, x_k: &[f64], g: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let grad_k = dgf.grad(x_k)?;
    let c: Vec<f64> = g
        .iter()
        .zip(&grad_k)
        .map(|(gi, di)| gamma * gi - di)
        .collect();
    let mut x = unconstrained_prox(dgf, &c)?;
    let r = dgf.norm(&x)?;
    if r > 1.0 {
        for v in x.iter_mut() {
            *v /= r;
        }
    }
    if dgf.norm(&x)? > 1.0 + FEASIBILITY_TOL {
        return Err(Error::Numerical("prox step left the ball".into()));
    }
    Ok(x)
}

/// Mirror descent from `x_0 = 0` with steps `γ_k = step0/√(k+1)`.
pub fn mirror_descent(problem: &ProxProblem, max_iters: usize) -> Result<MirrorDescentResult> {
    let start = Instant::now();
    let n = problem.objective.dim();
    let mut x = vec![0.0; n];
    let mut gaps = Vec::with_capacity(max_iters + 1);
    let mut best_gaps = Vec::with_capacity(max_iters + 1);
    let mut times = Vec::with_capacity(max_iters + 1);
    let mut best = f64::INFINITY;
    let mut hit = None;
    for k in 0..=max_iters {
        let gap = problem.objective.value(&x) - problem.f_star;
        best = best.min(gap);
        gaps.push(gap);
        best_gaps.push(best);
        times.push(start.elapsed().as_secs_f64() * 1e3);
        if gap <= problem.epsilon {
            hit = Some(k);
            break;
        }
        if k == max_iters {
            break;
        }
        let g = problem.objective.grad(&x);
        let gamma = problem.step0 / ((k + 1) as f64).sqrt();
        x = prox_step(&problem.dgf, &x, &g, gamma)?;
    }
    Ok(MirrorDescentResult {
        gaps,
        best_gaps,
        times_ms: times,
        iters_to_eps: hit,
        final_point: x,
    })
}
