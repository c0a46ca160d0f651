//! Factor norms `‖u‖' = min{‖x‖ : Px = u}` under onto maps `P`.
//!
//! The fiber `{Px = u}` is parametrized as `P⁺u + Nz` with an orthonormal
//! null-space basis `N`, and the child's smooth squared norm is minimized over
//! `z` by accelerated gradient descent. The gradient of the minimum value is
//! `(P⁺)ᵀ∇Φ(x*)` and does not depend on which minimizer `x*` is found.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::norm::{Derivation, NormFn, RegularityCertificate, SmoothSquaredNorm, SquaredNorm};

const MAX_ITERS: usize = 100_000;
const GRAD_RTOL: f64 = 1e-8;
/// FISTA iterations before a Newton phase is tried on small fibers.
const FISTA_PHASE: usize = 500;
const NEWTON_MAX_DIM: usize = 64;
const NEWTON_ITERS: usize = 200;
const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Which norm the fiber minimization targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuotientMode {
    /// The child's exact norm, via the surrogate solve plus a coordinate polish.
    Original,
    /// The child's smooth surrogate.
    Surrogate,
}

/// Result of one fiber minimization.
#[derive(Debug, Clone, PartialEq)]
pub struct QuotientSolution {
    /// Norm value `‖u‖'` (square root of the minimized squared norm).
    pub value: f64,
    pub argmin: Vec<f64>,
    pub iterations: usize,
}

/// Factor norm of a child under a full-row-rank map `P`.
#[derive(Clone)]
pub struct QuotientNorm {
    p: DMatrix<f64>,
    pinv: DMatrix<f64>,
    null: DMatrix<f64>,
    surrogate: SmoothSquaredNorm,
    original: Option<NormFn>,
}

impl std::fmt::Debug for QuotientNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QuotientNorm")
            .field("shape", &self.p.shape())
            .field("surrogate", &self.surrogate)
            .field("has_original", &self.original.is_some())
            .finish()
    }
}

impl QuotientNorm {
    pub fn new(
        p: DMatrix<f64>,
        surrogate: SmoothSquaredNorm,
        original: Option<NormFn>,
    ) -> Result<Self> {
        if p.ncols() != surrogate.dim() {
            return Err(Error::Data(format!(
                "map has {} columns, child lives on dimension {}",
                p.ncols(),
                surrogate.dim()
            )));
        }
        let (pinv, null) = linalg::pinv_and_nullspace(&p)?;
        Ok(Self {
            p,
            pinv,
            null,
            surrogate,
            original,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn nullspace_basis(&self) -> &DMatrix<f64> {
        &self.null
    }

    pub fn pseudo_inverse(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    pub fn surrogate(&self) -> &SmoothSquaredNorm {
        &self.surrogate
    }

    /// `x₀(u) = P⁺u`.
    pub fn lift(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check(u)?;
        Ok(linalg::mat_vec(&self.pinv, u))
    }

    fn check(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.p.nrows() {
            return Err(Error::Data(format!(
                "factor norm lives on dimension {}, got a vector of length {}",
                self.p.nrows(),
                u.len()
            )));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite input".into()));
        }
        Ok(())
    }

    fn point(&self, x0: &[f64], z: &[f64]) -> Vec<f64> {
        let mut x = x0.to_vec();
        for (j, zj) in z.iter().enumerate() {
            if *zj == 0.0 {
                continue;
            }
            for (i, xi) in x.iter_mut().enumerate() {
                *xi += self.null[(i, j)] * zj;
            }
        }
        x
    }

    /// Minimizes `Φ(x₀ + Nz)` for a lift `x₀` with `‖x₀‖₂ = 1`; returns the
    /// minimum, the minimizer and `∇Φ` there.
    fn minimize_normalized(&self, x0: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>, usize)> {
        let m = self.null.ncols();
        if m == 0 {
            let (v, g) = self.surrogate.eval_grad(x0)?;
            return Ok((v, x0.to_vec(), g, 0));
        }
        let fg = |z: &[f64]| self.fiber_eval_grad(x0, z);
        let l_cap = {
            let mut s = 0.0;
            for j in 0..m {
                let col: Vec<f64> = self.null.column(j).iter().copied().collect();
                s += self.surrogate.eval(&col)?;
            }
            2.0 * self.surrogate.kappa() * s
        };
        let mut lip = (l_cap * 1e-2).max(f64::MIN_POSITIVE);
        let mut z = vec![0.0; m];
        let mut y = z.clone();
        let (mut fz, _, _) = fg(&z)?;
        let mut tk = 1.0_f64;
        let mut last = f64::INFINITY;
        for it in 0..MAX_ITERS {
            let (fy, gy, gfull) = fg(&y)?;
            let gn = linalg::norm2(&gy);
            last = gn;
            if gn <= GRAD_RTOL * (1.0 + fy) {
                return Ok((fy, self.point(x0, &y), gfull, it));
            }
            if it > 0 && it % FISTA_PHASE == 0 && m <= NEWTON_MAX_DIM {
                if let Some((f, zn, g, k)) = self.newton(x0, &z)? {
                    return Ok((f, self.point(x0, &zn), g, it + k));
                }
            }
            let (z_new, f_new) = loop {
                let cand: Vec<f64> = y.iter().zip(&gy).map(|(a, b)| a - b / lip).collect();
                let fc = self.surrogate.eval(&self.point(x0, &cand))?;
                if fc <= fy - 0.5 * gn * gn / lip + 1e-15 * fy.abs() || lip >= l_cap {
                    break (cand, fc);
                }
                lip = (2.0 * lip).min(l_cap);
            };
            if f_new > fz {
                // restart momentum
                tk = 1.0;
                y = z.clone();
                continue;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
            let beta = (tk - 1.0) / t_next;
            y = z_new
                .iter()
                .zip(&z)
                .map(|(a, b)| a + beta * (a - b))
                .collect();
            z = z_new;
            fz = f_new;
            tk = t_next;
            lip = (lip * 0.95).max(f64::MIN_POSITIVE);
        }
        Err(Error::Convergence {
            what: "factor-norm fiber minimization",
            iterations: MAX_ITERS,
            residual: last,
        })
    }

    /// `Φ(x₀ + Nz)`, its gradient in `z` and `∇Φ` at the point.
    fn fiber_eval_grad(&self, x0: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let x = self.point(x0, z);
        let (v, g) = self.surrogate.eval_grad(&x)?;
        let gz = linalg::mat_t_vec(&self.null, &g);
        Ok((v, gz, g))
    }

    /// Damped Newton on the fiber with a finite-difference Hessian whose
    /// eigenvalues are floored; `None` when it stalls.
    fn newton(&self, x0: &[f64], z: &[f64]) -> Result<Option<(f64, Vec<f64>, Vec<f64>, usize)>> {
        let m = z.len();
        let mut z = z.to_vec();
        for it in 0..NEWTON_ITERS {
            let (f, g, gfull) = self.fiber_eval_grad(x0, &z)?;
            if linalg::norm2(&g) <= GRAD_RTOL * (1.0 + f) {
                return Ok(Some((f, z, gfull, it)));
            }
            let h = 1e-6 * (1.0 + linalg::norm2(&z));
            let mut hess = DMatrix::zeros(m, m);
            for j in 0..m {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[j] += h;
                zm[j] -= h;
                let gp = self.fiber_eval_grad(x0, &zp)?.1;
                let gm = self.fiber_eval_grad(x0, &zm)?.1;
                for i in 0..m {
                    hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
                }
            }
            let hess = (&hess + hess.transpose()) * 0.5;
            let (values, vectors) = linalg::sym_eigen(&hess)?;
            let top = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            if !(top > 0.0) {
                return Ok(None);
            }
            let floor = 1e-12 * top;
            let mut dir = vec![0.0; m];
            for (k, lam) in values.iter().enumerate() {
                let v = vectors.column(k);
                let coef = v.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / lam.max(floor);
                for (d, vi) in dir.iter_mut().zip(v.iter()) {
                    *d -= coef * vi;
                }
            }
            let slope = linalg::dot(&g, &dir);
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let cand: Vec<f64> = z.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
                let fc = self.surrogate.eval(&self.point(x0, &cand))?;
                if fc <= f + 1e-4 * step * slope + 1e-15 * f.abs() {
                    z = cand;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                return Ok(None);
            }
        }
        Ok(None)
    }

    /// Minimizes over the fiber; returns `(Ψ̄(u), x*, ∇Φ(x*))`.
    fn solve(&self, u: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>, usize)> {
        let x0 = self.lift(u)?;
        let scale = linalg::norm2(&x0);
        if scale == 0.0 {
            return Ok((0.0, x0.clone(), vec![0.0; x0.len()], 0));
        }
        let unit: Vec<f64> = x0.iter().map(|v| v / scale).collect();
        let (v, x, g, it) = self.minimize_normalized(&unit)?;
        Ok((
            v * scale * scale,
            x.into_iter().map(|xi| xi * scale).collect(),
            g.into_iter().map(|gi| gi * scale).collect(),
            it,
        ))
    }

    /// `‖u‖'` together with a minimizer over the fiber.
    pub fn eval(&self, u: &[f64], mode: QuotientMode) -> Result<QuotientSolution> {
        let (v, x, _, iterations) = self.solve(u)?;
        match mode {
            QuotientMode::Surrogate => Ok(QuotientSolution {
                value: v.sqrt(),
                argmin: x,
                iterations,
            }),
            QuotientMode::Original => {
                let norm = self.original.as_ref().ok_or_else(|| {
                    Error::State("no exact child norm attached to this factor norm".into())
                })?;
                let (value, argmin) = self.polish(norm, x)?;
                Ok(QuotientSolution {
                    value,
                    argmin,
                    iterations,
                })
            }
        }
    }

    /// Golden-section line searches of the exact norm along the columns of `N`.
    fn polish(&self, norm: &NormFn, mut x: Vec<f64>) -> Result<(f64, Vec<f64>)> {
        let m = self.null.ncols();
        let mut best = norm(&x)?;
        if m == 0 || best == 0.0 {
            return Ok((best, x));
        }
        let mut radius = linalg::norm2(&x);
        let floor = 1e-12 * radius;
        let mut sweeps = 0;
        while radius > floor && sweeps < 500 {
            sweeps += 1;
            let before = best;
            for j in 0..m {
                let dir: Vec<f64> = self.null.column(j).iter().copied().collect();
                let along = |s: f64| -> Result<f64> {
                    let y: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
                    norm(&y)
                };
                let (mut a, mut b) = (-radius, radius);
                let mut c = b - GOLDEN * (b - a);
                let mut d = a + GOLDEN * (b - a);
                let (mut fc, mut fd) = (along(c)?, along(d)?);
                while b - a > 1e-3 * floor.max(1e-300) + 1e-14 * radius {
                    if fc <= fd {
                        b = d;
                        d = c;
                        fd = fc;
                        c = b - GOLDEN * (b - a);
                        fc = along(c)?;
                    } else {
                        a = c;
                        c = d;
                        fc = fd;
                        d = a + GOLDEN * (b - a);
                        fd = along(d)?;
                    }
                }
                let s = 0.5 * (a + b);
                let fs = along(s)?;
                if fs < best {
                    best = fs;
                    for (xi, di) in x.iter_mut().zip(&dir) {
                        *xi += s * di;
                    }
                }
            }
            if best >= before * (1.0 - 1e-14) {
                radius *= 0.25;
            }
        }
        Ok((best, x))
    }

    /// `∇Ψ̄(u) = (P⁺)ᵀ∇Φ(x*)` for the surrogate factor norm `Ψ̄ = (‖·‖')²`.
    pub fn grad(&self, u: &[f64]) -> Result<Vec<f64>> {
        let (_, _, g, _) = self.solve(u)?;
        Ok(linalg::mat_t_vec(&self.pinv, &g))
    }
}

/// Squared surrogate factor norm `Ψ̄(u) = min{Φ(x) : Px = u}`.
#[derive(Debug, Clone)]
pub struct QuotientSquared(pub QuotientNorm);

impl SquaredNorm for QuotientSquared {
    fn dim(&self) -> usize {
        self.0.p.nrows()
    }

    fn value(&self, u: &[f64]) -> Result<f64> {
        Ok(self.0.solve(u)?.0)
    }

    fn value_and_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, _, g, _) = self.0.solve(u)?;
        Ok((v, linalg::mat_t_vec(&self.0.pinv, &g)))
    }
}

/// Certificate for the factor norm of a certified norm; constants unchanged.
pub fn quotient_certificate(
    cert: &RegularityCertificate,
    p: &DMatrix<f64>,
) -> Result<RegularityCertificate> {
    let qn = QuotientNorm::new(p.clone(), cert.surrogate().clone(), None)?;
    RegularityCertificate::new(
        Arc::new(QuotientSquared(qn)),
        Derivation::Quotient {
            rows: p.nrows(),
            cols: p.ncols(),
            child: Box::new(cert.derivation().clone()),
        },
    )
}
