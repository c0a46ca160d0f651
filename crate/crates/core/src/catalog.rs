//! Base norms with closed-form squared values, gradients and smoothness constants.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::norm::{Derivation, RegularityCertificate, SmoothSquaredNorm, SquaredNorm};

fn check_smooth_exponent(p: f64) -> Result<()> {
    if !(p.is_finite() && p >= 2.0) {
        return Err(Error::Domain(format!(
            "exponent p = {p} must lie in [2, inf)"
        )));
    }
    Ok(())
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite entry".into()));
    }
    Ok(())
}

/// `‖x‖_p` for `p ∈ [1, ∞]`, computed with max-scaling to avoid overflow.
pub fn lp_norm(p: f64, x: &[f64]) -> f64 {
    let m = linalg::max_abs(x);
    if m == 0.0 || p.is_infinite() {
        return m;
    }
    if p == 2.0 {
        return linalg::norm2(x);
    }
    m * x
        .iter()
        .map(|v| (v.abs() / m).powf(p))
        .sum::<f64>()
        .powf(1.0 / p)
}

/// `(‖x‖_p², ∇‖x‖_p²)` for `2 <= p < ∞`.
pub fn lp_sq_eval_grad(p: f64, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_smooth_exponent(p)?;
    check_finite(x)?;
    Ok(lp_sq_unchecked(p, x))
}

fn lp_sq_unchecked(p: f64, x: &[f64]) -> (f64, Vec<f64>) {
    let r = lp_norm(p, x);
    if r == 0.0 {
        return (0.0, vec![0.0; x.len()]);
    }
    // 2‖x‖^{2-p}|x_j|^{p-1} sign(x_j) = 2‖x‖ (|x_j|/‖x‖)^{p-1} sign(x_j)
    let grad = x
        .iter()
        .map(|&v| 2.0 * r * (v.abs() / r).powf(p - 1.0) * v.signum())
        .collect();
    (r * r, grad)
}

/// `Φ(x) = ‖x‖_p²` on `ℝⁿ`, `2 <= p < ∞`.
#[derive(Debug, Clone)]
pub struct LpSquared {
    p: f64,
    n: usize,
}

impl LpSquared {
    pub fn new(p: f64, n: usize) -> Result<Self> {
        check_smooth_exponent(p)?;
        if n == 0 {
            return Err(Error::Data("dimension must be positive".into()));
        }
        Ok(Self { p, n })
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

impl SquaredNorm for LpSquared {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        let r = lp_norm(self.p, x);
        Ok(r * r)
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(lp_sq_unchecked(self.p, x))
    }

    fn is_absolute(&self) -> bool {
        true
    }

    fn linear_prox(&self, c: &[f64]) -> Option<Vec<f64>> {
        // argmin cᵀx + ‖x‖_p² = -½ ‖c‖_{p*}^{2-p*} |c|^{p*-1} sign(c)
        let pd = self.p / (self.p - 1.0);
        let r = lp_norm(pd, c);
        if r == 0.0 {
            return Some(vec![0.0; c.len()]);
        }
        Some(
            c.iter()
                .map(|&v| -0.5 * r * (v.abs() / r).powf(pd - 1.0) * v.signum())
                .collect(),
        )
    }
}

/// Certificate for `‖·‖_p` itself: `κ = p - 1`, `ς = 1`.
pub fn lp_certificate(p: f64, n: usize) -> Result<RegularityCertificate> {
    let sq = LpSquared::new(p, n)?;
    RegularityCertificate::new(Arc::new(sq), Derivation::LpSmooth { p, n })
}

/// Exponent of the ℓ_q / Schatten-q surrogate for a max-type norm over `d` entries.
pub fn surrogate_exponent(d: usize) -> f64 {
    ((d as f64 + 1.0).ln().ceil() + 1.0).max(2.0)
}

/// ℓ_q surrogate of `‖·‖_∞` on `ℝⁿ` with `q = max(2, ⌈ln(n+1)⌉ + 1)`:
/// `κ = q - 1`, `ς = n^{1/q}`.
pub fn smooth_surrogate_for_linf(n: usize) -> Result<(SmoothSquaredNorm, RegularityCertificate)> {
    let q = surrogate_exponent(n);
    let cert = RegularityCertificate::new(
        Arc::new(LpSquared::new(q, n)?),
        Derivation::LinfSurrogate { n, q },
    )?;
    Ok((cert.surrogate().clone(), cert))
}

/// Schatten-`p` norm of the row-major `m × n` matrix `x`, `p ∈ [1, ∞]`.
pub fn schatten_norm(p: f64, m: usize, n: usize, x: &[f64]) -> Result<f64> {
    if x.len() != m * n {
        return Err(Error::Data(format!(
            "expected {m}x{n} = {} entries, got {}",
            m * n,
            x.len()
        )));
    }
    check_finite(x)?;
    let s = linalg::singular_values(&DMatrix::from_row_slice(m, n, x))?;
    Ok(lp_norm(p, &s))
}

/// `(‖σ(X)‖_p², ∇)` for a row-major `m × n` matrix and `2 <= p < ∞`.
///
/// The gradient `2‖σ‖_p U diag((σ/‖σ‖_p)^{p-1}) Vᵀ` does not depend on the
/// choice of singular vectors inside a repeated singular value.
pub fn schatten_sq_eval_grad(p: f64, m: usize, n: usize, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_smooth_exponent(p)?;
    if x.len() != m * n {
        return Err(Error::Data(format!(
            "expected {m}x{n} = {} entries, got {}",
            m * n,
            x.len()
        )));
    }
    check_finite(x)?;
    schatten_unchecked(p, m, n, x)
}

fn schatten_unchecked(p: f64, m: usize, n: usize, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mat = DMatrix::from_row_slice(m, n, x);
    if mat.amax() == 0.0 {
        return Ok((0.0, vec![0.0; m * n]));
    }
    let (u, s, v) = linalg::thin_svd(&mat)?;
    let r = lp_norm(p, &s);
    let weights: Vec<f64> = s
        .iter()
        .map(|&sj| 2.0 * r * (sj / r).powf(p - 1.0))
        .collect();
    let mut g = DMatrix::zeros(m, n);
    for (k, w) in weights.iter().enumerate() {
        if *w != 0.0 {
            g += (u.column(k) * v.column(k).transpose()) * *w;
        }
    }
    // row-major flattening
    let grad = (0..m)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| g[(i, j)])
        .collect();
    Ok((r * r, grad))
}

/// `Φ(X) = ‖σ(X)‖_p²` on row-major `m × n` matrices, `2 <= p < ∞`.
#[derive(Debug, Clone)]
pub struct SchattenSquared {
    p: f64,
    m: usize,
    n: usize,
}

impl SchattenSquared {
    pub fn new(p: f64, m: usize, n: usize) -> Result<Self> {
        check_smooth_exponent(p)?;
        if m == 0 || n == 0 {
            return Err(Error::Data("matrix dimensions must be positive".into()));
        }
        Ok(Self { p, m, n })
    }
}

impl SquaredNorm for SchattenSquared {
    fn dim(&self) -> usize {
        self.m * self.n
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        let s = linalg::singular_values(&DMatrix::from_row_slice(self.m, self.n, x))?;
        let r = lp_norm(self.p, &s);
        Ok(r * r)
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        schatten_unchecked(self.p, self.m, self.n, x)
    }
}

/// Certificate for Schatten-p itself: `κ = max(2, p - 1)`, `ς = 1`.
pub fn schatten_certificate(p: f64, m: usize, n: usize) -> Result<RegularityCertificate> {
    let sq = SchattenSquared::new(p, m, n)?;
    RegularityCertificate::new(Arc::new(sq), Derivation::SchattenSmooth { p, m, n })
}

/// Schatten-q surrogate of the spectral norm on `m × n` matrices with
/// `q = max(2, ⌈ln(d+1)⌉ + 1)`, `d = min(m, n)`: `κ = max(2, q-1)`, `ς = d^{1/q}`.
pub fn smooth_surrogate_for_spectral(
    m: usize,
    n: usize,
) -> Result<(SmoothSquaredNorm, RegularityCertificate)> {
    let q = surrogate_exponent(m.min(n));
    let cert = RegularityCertificate::new(
        Arc::new(SchattenSquared::new(q, m, n)?),
        Derivation::SpectralSurrogate { m, n, q },
    )?;
    Ok((cert.surrogate().clone(), cert))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|j| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[j] += h;
                b[j] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        linalg::norm2(&d) / linalg::norm2(b).max(1e-300)
    }

    #[test]
    fn lp_euclidean_case() {
        let (v, g) = lp_sq_eval_grad(2.0, &[3.0, 4.0]).unwrap();
        assert_relative_eq!(v, 25.0, epsilon = 1e-12);
        assert_relative_eq!(g[0], 6.0, epsilon = 1e-12);
        assert_relative_eq!(g[1], 8.0, epsilon = 1e-12);
    }

    #[test]
    fn lp4_on_ones_matches_finite_differences() {
        let x = [1.0, 1.0];
        let (v, g) = lp_sq_eval_grad(4.0, &x).unwrap();
        assert_relative_eq!(v, 2f64.sqrt(), epsilon = 1e-14);
        let fd = fd_grad(|y| lp_norm(4.0, y).powi(2), &x, 1e-5);
        assert!(rel_err(&g, &fd) <= 1e-7, "{g:?} vs {fd:?}");
    }

    #[test]
    fn lp_axis_vector() {
        let (v, g) = lp_sq_eval_grad(3.0, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(g, vec![2.0, 0.0, 0.0]);
        let (v, g) = lp_sq_eval_grad(3.0, &[0.0; 3]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn lp_errors() {
        assert!(matches!(
            lp_sq_eval_grad(1.5, &[1.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            lp_sq_eval_grad(f64::INFINITY, &[1.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            lp_sq_eval_grad(3.0, &[f64::NAN]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn lp_linear_prox_is_stationary() {
        let sq = LpSquared::new(4.0, 3).unwrap();
        let c = [0.7, -0.2, 1.3];
        let x = sq.linear_prox(&c).unwrap();
        let (_, g) = sq.value_and_grad(&x).unwrap();
        for j in 0..3 {
            assert!((c[j] + g[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn schatten2_is_frobenius() {
        let x = [1.0, -2.0, 0.5, 3.0, 0.0, 1.5];
        let (v, g) = schatten_sq_eval_grad(2.0, 2, 3, &x).unwrap();
        assert_relative_eq!(v, x.iter().map(|a| a * a).sum::<f64>(), epsilon = 1e-12);
        for (gi, xi) in g.iter().zip(&x) {
            assert_relative_eq!(*gi, 2.0 * xi, epsilon = 1e-12);
        }
    }

    #[test]
    fn schatten4_diagonal_matches_finite_differences() {
        let x = [2.0, 0.0, 0.0, 1.0];
        let (v, g) = schatten_sq_eval_grad(4.0, 2, 2, &x).unwrap();
        assert_relative_eq!(v, 17f64.sqrt(), epsilon = 1e-13);
        let fd = fd_grad(|y| schatten_norm(4.0, 2, 2, y).unwrap().powi(2), &x, 1e-5);
        assert!(rel_err(&g, &fd) <= 1e-6, "{g:?} vs {fd:?}");
    }

    #[test]
    fn schatten_rank_one() {
        let u = [0.6, 0.8];
        let v = [1.0 / 3f64.sqrt(); 3];
        let x: Vec<f64> = u
            .iter()
            .flat_map(|a| v.iter().map(move |b| a * b))
            .collect();
        let (val, g) = schatten_sq_eval_grad(3.0, 2, 3, &x).unwrap();
        assert_relative_eq!(val, 1.0, epsilon = 1e-12);
        for (gi, xi) in g.iter().zip(&x) {
            assert_relative_eq!(*gi, 2.0 * xi, epsilon = 1e-10);
        }
    }

    #[test]
    fn linf_surrogate_constants() {
        let (_, c) = smooth_surrogate_for_linf(1).unwrap();
        assert_eq!((c.kappa(), c.sigma()), (1.0, 1.0));
        let (s, c) = smooth_surrogate_for_linf(20).unwrap();
        assert_eq!(c.kappa(), 4.0);
        assert_relative_eq!(c.sigma(), 20f64.powf(0.2), epsilon = 1e-15);
        assert!(c.sigma() <= std::f64::consts::E);
        let ones = vec![1.0; 20];
        let ratio = s.norm(&ones).unwrap() / lp_norm(f64::INFINITY, &ones);
        assert_relative_eq!(ratio, c.sigma(), epsilon = 1e-12);
    }

    #[test]
    fn linf_surrogate_extremal_vector_n3() {
        let (s, c) = smooth_surrogate_for_linf(3).unwrap();
        let x = [1.0, 1.0, 1.0];
        assert_relative_eq!(s.norm(&x).unwrap(), c.sigma(), epsilon = 1e-14);
    }

    #[test]
    fn spectral_surrogate_constants() {
        let (_, c) = smooth_surrogate_for_spectral(3, 3).unwrap();
        // q = max(2, ceil(ln 4) + 1) = 3
        assert_eq!(c.kappa(), 2.0);
        assert_relative_eq!(c.sigma(), 3f64.powf(1.0 / 3.0), epsilon = 1e-15);
    }
}
