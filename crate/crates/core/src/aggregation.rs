//! Smooth surrogates for `θ`-aggregated norms `θ^{1/2}(‖x_1‖_1², ..., ‖x_K‖_K²)`.
//!
//! [`aggregate_general`] works for any differentiable monotone aggregator and
//! builds `Φ(x) = min_{θ̄(t) <= 1} [Σ ω_i^{p+1}(x_i) / t_i^p]^{1/(p+1)}`, where
//! `ω_i` are the children's smooth squared norms. [`aggregate_absolute`] is the
//! sharper composition available when `θ` is itself a regular absolute norm.

use std::sync::Arc;

use crate::catalog::{lp_certificate, LpSquared};
use crate::error::{Error, Result};
use crate::linalg;
use crate::norm::{BlockLayout, Derivation, RegularityCertificate, SmoothSquaredNorm, SquaredNorm};
use crate::theta::{bar_augment, unit_scale, ThetaAggregator, ThetaForm};

/// Blocks with `ω_i < ZERO_BLOCK_RTOL * max_j ω_j` are treated as zero.
pub const ZERO_BLOCK_RTOL: f64 = 1e-14;

const FIXED_POINT_TOL: f64 = 1e-12;
const FIXED_POINT_MAX_ITERS: usize = 500;
const FALLBACK_MAX_ITERS: usize = 20_000;
const MAX_SIGN_AVERAGE_BLOCKS: usize = 16;

/// Default exponent `p = ⌈ln(K+1)⌉`.
pub fn default_p(blocks: usize) -> u32 {
    ((blocks as f64 + 1.0).ln().ceil() as u32).max(1)
}

/// Runs the preprocessing pipeline: unit scaling followed by bar augmentation.
pub fn preprocess_theta(theta: &ThetaAggregator) -> Result<ThetaAggregator> {
    bar_augment(&unit_scale(theta)?)
}

/// Minimizer `t(x)` of `f(x, t) = Σ ω_i^{p+1}/t_i^p` over `{θ̄(t) <= 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MinimizerResult {
    pub t: Vec<f64>,
    /// `λ(x) = p [Σ ω_i θ_i^{p/(p+1)}]^{p+1}`.
    pub lambda: f64,
    /// `θ_i(x) = [∇θ̄(t(x))]_i`; zero on vanishing blocks.
    pub theta_grad_at_t: Vec<f64>,
    pub iterations: usize,
    pub used_fallback: bool,
}

/// Surrogate state for general aggregation. Implements `Φ` as a [`SquaredNorm`].
#[derive(Debug, Clone)]
pub struct AggregateState {
    theta: ThetaAggregator,
    theta_bar: ThetaAggregator,
    p: u32,
    children: Vec<SmoothSquaredNorm>,
    /// `c_i = θ(e_i)`: children enter the preprocessed aggregator as `c_i ω_i`.
    child_scale: Vec<f64>,
    layout: BlockLayout,
}

struct Solved {
    t: Vec<f64>,
    grad: Vec<f64>,
    iterations: usize,
    used_fallback: bool,
}

impl AggregateState {
    /// Preprocesses `theta` and binds it to the children's smooth squared norms.
    pub fn new(
        theta: &ThetaAggregator,
        children: Vec<SmoothSquaredNorm>,
        p: Option<u32>,
    ) -> Result<Self> {
        let k = theta.arity();
        if children.len() != k {
            return Err(Error::Data(format!(
                "aggregator of arity {k} given {} children",
                children.len()
            )));
        }
        if theta.is_bar_augmented() {
            return Err(Error::State(
                "pass the aggregator before bar augmentation".into(),
            ));
        }
        if !theta.is_differentiable_off_origin() {
            return Err(Error::InvalidTheta(
                "general aggregation needs an aggregator differentiable on the open orthant".into(),
            ));
        }
        if theta.is_custom() {
            theta.validate_by_sampling(200, 0x5eed)?;
        }
        let p = match p {
            Some(0) => {
                return Err(Error::Domain(
                    "exponent p must be a positive integer".into(),
                ))
            }
            Some(p) => p,
            None => default_p(k),
        };
        let mut child_scale = Vec::with_capacity(k);
        for i in 0..k {
            let mut e = vec![0.0; k];
            e[i] = 1.0;
            child_scale.push(theta.eval(&e)?);
        }
        let theta_bar = preprocess_theta(theta)?;
        let layout = BlockLayout::new(
            &children
                .iter()
                .map(SmoothSquaredNorm::dim)
                .collect::<Vec<_>>(),
        )?;
        Ok(Self {
            theta: theta.clone(),
            theta_bar,
            p,
            children,
            child_scale,
            layout,
        })
    }

    pub fn p(&self) -> u32 {
        self.p
    }

    pub fn num_blocks(&self) -> usize {
        self.children.len()
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn theta(&self) -> &ThetaAggregator {
        &self.theta
    }

    pub fn theta_bar(&self) -> &ThetaAggregator {
        &self.theta_bar
    }

    pub fn children(&self) -> &[SmoothSquaredNorm] {
        &self.children
    }

    /// `q = p/(p+1)`.
    pub fn q(&self) -> f64 {
        let p = self.p as f64;
        p / (p + 1.0)
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.layout.total_dim() {
            return Err(Error::Data(format!(
                "aggregate lives on dimension {}, got a vector of length {}",
                self.layout.total_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Block values `ω'_i(x_i) = c_i ω_i(x_i)` seen by the preprocessed aggregator.
    pub fn block_omegas(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        self.children
            .iter()
            .enumerate()
            .map(|(i, c)| Ok(self.child_scale[i] * c.eval(self.layout.block(x, i))?))
            .collect()
    }

    /// `θ^{1/2}(ω_1(x_1), ..., ω_K(x_K))` with the children's surrogates and the
    /// original aggregator.
    pub fn aggregated_norm(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let omega: Vec<f64> = self
            .children
            .iter()
            .enumerate()
            .map(|(i, c)| c.eval(self.layout.block(x, i)))
            .collect::<Result<_>>()?;
        Ok(self.theta.eval(&omega)?.sqrt())
    }

    fn active(omega: &[f64]) -> Result<Vec<bool>> {
        let top = omega.iter().fold(0.0_f64, |m, v| m.max(*v));
        if top == 0.0 {
            return Err(Error::Domain("t(x) is undefined at x = 0".into()));
        }
        if !top.is_finite() {
            return Err(Error::Data("non-finite block norm".into()));
        }
        Ok(omega.iter().map(|w| *w >= ZERO_BLOCK_RTOL * top).collect())
    }

    fn normalize(&self, t: &mut [f64]) -> Result<()> {
        let s = self.theta_bar.eval_unchecked(t);
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Numerical(format!(
                "aggregator value {s} during t(x) solve"
            )));
        }
        for v in t.iter_mut() {
            *v /= s;
        }
        Ok(())
    }

    fn active_grad(&self, t: &[f64], active: &[bool]) -> Result<Vec<f64>> {
        let g = self.theta_bar.face_grad(t)?;
        for (i, gi) in g.iter().enumerate() {
            if active[i] && !(gi.is_finite() && *gi > 0.0) {
                return Err(Error::Numerical(format!(
                    "aggregator gradient entry {i} is {gi}"
                )));
            }
        }
        Ok(g)
    }

    /// One undamped fixed-point image `t_i ∝ ω_i g_i^{-1/(p+1)}`, normalized.
    fn fixed_point_image(&self, omega: &[f64], g: &[f64], active: &[bool]) -> Result<Vec<f64>> {
        let e = 1.0 / (self.p as f64 + 1.0);
        let mut next: Vec<f64> = (0..omega.len())
            .map(|i| {
                if active[i] {
                    omega[i] * g[i].powf(-e)
                } else {
                    0.0
                }
            })
            .collect();
        self.normalize(&mut next)?;
        Ok(next)
    }

    fn solve(&self, omega: &[f64]) -> Result<Solved> {
        let active = Self::active(omega)?;
        let top = omega.iter().fold(0.0_f64, |m, v| m.max(*v));
        let omega: Vec<f64> = omega
            .iter()
            .zip(&active)
            .map(|(w, a)| if *a { w / top } else { 0.0 })
            .collect();

        let mut t = omega.clone();
        self.normalize(&mut t)?;
        let mut alpha = 1.0_f64;
        let mut prev = f64::INFINITY;
        let mut residual = f64::INFINITY;
        for it in 0..FIXED_POINT_MAX_ITERS {
            let g = self.active_grad(&t, &active)?;
            let target = self.fixed_point_image(&omega, &g, &active)?;
            residual = linalg::max_abs(
                &target
                    .iter()
                    .zip(&t)
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>(),
            );
            if residual <= FIXED_POINT_TOL {
                let g = self.active_grad(&target, &active)?;
                return Ok(Solved {
                    t: target,
                    grad: g,
                    iterations: it + 1,
                    used_fallback: false,
                });
            }
            if residual > prev {
                alpha *= 0.5;
            }
            prev = residual;
            let mut next: Vec<f64> = t
                .iter()
                .zip(&target)
                .map(|(a, b)| {
                    if *a > 0.0 {
                        ((1.0 - alpha) * a.ln() + alpha * b.ln()).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            self.normalize(&mut next)?;
            t = next;
        }
        self.solve_fallback(&omega, &active, t, residual)
    }

    /// Gradient descent on `h(u) = p ln θ̄(e^u) + ln Σ a_i e^{-p u_i}`, the log of
    /// `f` along the normalized curve `t = e^u / θ̄(e^u)`.
    fn solve_fallback(
        &self,
        omega: &[f64],
        active: &[bool],
        start: Vec<f64>,
        last: f64,
    ) -> Result<Solved> {
        let p = self.p as f64;
        let idx: Vec<usize> = (0..omega.len()).filter(|&i| active[i]).collect();
        let log_a: Vec<f64> = idx.iter().map(|&i| (p + 1.0) * omega[i].ln()).collect();
        let k = omega.len();
        let to_t = |u: &[f64]| {
            let mut t = vec![0.0; k];
            for (j, &i) in idx.iter().enumerate() {
                t[i] = u[j].exp();
            }
            t
        };
        let h_and_grad = |u: &[f64]| -> Result<(f64, Vec<f64>)> {
            let t = to_t(u);
            let tb = self.theta_bar.eval_unchecked(&t);
            let g = self.active_grad(&t, active)?;
            let expo: Vec<f64> = log_a.iter().zip(u).map(|(la, uj)| la - p * uj).collect();
            let m = expo.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let weights: Vec<f64> = expo.iter().map(|e| (e - m).exp()).collect();
            let sum: f64 = weights.iter().sum();
            let h = p * tb.ln() + m + sum.ln();
            let grad = idx
                .iter()
                .enumerate()
                .map(|(j, &i)| p * g[i] * t[i] / tb - p * weights[j] / sum)
                .collect();
            Ok((h, grad))
        };

        let mut u: Vec<f64> = idx
            .iter()
            .map(|&i| start[i].max(f64::MIN_POSITIVE).ln())
            .collect();
        let (mut h, mut g) = h_and_grad(&u)?;
        let mut step = 1.0;
        let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
        for _ in 0..FALLBACK_MAX_ITERS {
            if linalg::max_abs(&g) <= 1e-15 {
                break;
            }
            if let Some((pu, pg)) = &prev {
                let s: Vec<f64> = u.iter().zip(pu).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g.iter().zip(pg).map(|(a, b)| a - b).collect();
                let sy = linalg::dot(&s, &y);
                if sy > 0.0 {
                    step = (linalg::dot(&s, &s) / sy).clamp(1e-10, 1e6);
                }
            }
            let gg = linalg::dot(&g, &g);
            let mut accepted = false;
            for _ in 0..60 {
                let cand: Vec<f64> = u.iter().zip(&g).map(|(a, b)| a - step * b).collect();
                let (hc, gc) = h_and_grad(&cand)?;
                if hc <= h - 1e-4 * step * gg {
                    prev = Some((
                        std::mem::replace(&mut u, cand),
                        std::mem::replace(&mut g, gc),
                    ));
                    h = hc;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        let mut t = to_t(&u);
        self.normalize(&mut t)?;
        let g = self.active_grad(&t, active)?;
        let target = self.fixed_point_image(omega, &g, active)?;
        let residual = linalg::max_abs(
            &target
                .iter()
                .zip(&t)
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        if residual <= 1e-9 {
            let g = self.active_grad(&target, active)?;
            return Ok(Solved {
                t: target,
                grad: g,
                iterations: FIXED_POINT_MAX_ITERS,
                used_fallback: true,
            });
        }
        Err(Error::Convergence {
            what: "t(x) fixed point",
            iterations: FIXED_POINT_MAX_ITERS,
            residual: residual.min(last),
        })
    }

    /// Minimizer `t(x)` with `λ(x)` and `∇θ̄(t(x))`. Fails at `x = 0`.
    pub fn t_of_x(&self, x: &[f64]) -> Result<MinimizerResult> {
        let omega = self.block_omegas(x)?;
        let solved = self.solve(&omega)?;
        let active = Self::active(&omega)?;
        let q = self.q();
        let mut theta_grad = solved.grad;
        for (g, a) in theta_grad.iter_mut().zip(&active) {
            if !a {
                *g = 0.0;
            }
        }
        let s: f64 = (0..omega.len())
            .filter(|&i| active[i])
            .map(|i| omega[i] * theta_grad[i].powf(q))
            .sum();
        Ok(MinimizerResult {
            t: solved.t,
            lambda: self.p as f64 * s.powi(self.p as i32 + 1),
            theta_grad_at_t: theta_grad,
            iterations: solved.iterations,
            used_fallback: solved.used_fallback,
        })
    }

    /// `S(x) = Σ ω_i θ_i^{p/(p+1)}` together with the block weights `θ_i^{p/(p+1)}`.
    fn weighted_sum(&self, x: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let omega = self.block_omegas(x)?;
        if omega.iter().all(|w| *w == 0.0) {
            return Ok((0.0, vec![0.0; omega.len()], omega));
        }
        let active = Self::active(&omega)?;
        let solved = self.solve(&omega)?;
        let q = self.q();
        let weights: Vec<f64> = (0..omega.len())
            .map(|i| {
                if active[i] {
                    solved.grad[i].powf(q)
                } else {
                    0.0
                }
            })
            .collect();
        let s = omega.iter().zip(&weights).map(|(w, c)| w * c).sum();
        Ok((s, weights, omega))
    }

    /// `φ(x) = min_t f(x, t) = [Σ ω_i θ_i^{p/(p+1)}]^{p+1}`.
    pub fn phi_eval(&self, x: &[f64]) -> Result<f64> {
        let (s, _, _) = self.weighted_sum(x)?;
        Ok(s.powi(self.p as i32 + 1))
    }

    /// `∇φ`, block `i` equal to `(p+1) θ_i^{p/(p+1)} S^p ∇ω_i(x_i)`.
    pub fn phi_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (s, weights, _) = self.weighted_sum(x)?;
        let factor = (self.p as f64 + 1.0) * s.powi(self.p as i32);
        self.assemble_grad(x, &weights, factor)
    }

    fn assemble_grad(&self, x: &[f64], weights: &[f64], factor: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        for (i, child) in self.children.iter().enumerate() {
            if weights[i] == 0.0 {
                continue;
            }
            let r = self.layout.range(i);
            let g = child.grad(&x[r.clone()])?;
            let c = factor * weights[i] * self.child_scale[i];
            for (o, gi) in out[r].iter_mut().zip(g) {
                *o = c * gi;
            }
        }
        Ok(out)
    }
}

impl SquaredNorm for AggregateState {
    fn dim(&self) -> usize {
        self.layout.total_dim()
    }

    /// `Φ(x) = φ(x)^{1/(p+1)}`.
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.weighted_sum(x)?.0)
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (s, weights, _) = self.weighted_sum(x)?;
        let g = self.assemble_grad(x, &weights, 1.0)?;
        Ok((s, g))
    }
}

/// General aggregation: preprocesses `theta`, aggregates the children's
/// surrogates and certifies the result.
pub fn aggregate_general(
    theta: &ThetaAggregator,
    children: &[RegularityCertificate],
    p_override: Option<u32>,
) -> Result<(Arc<AggregateState>, RegularityCertificate)> {
    let state = Arc::new(AggregateState::new(
        theta,
        children.iter().map(|c| c.surrogate().clone()).collect(),
        p_override,
    )?);
    let derivation = Derivation::AggregateGeneral {
        blocks: children.len(),
        p: state.p,
        gradient: theta.gradient_source(),
        zero_block_rtol: ZERO_BLOCK_RTOL,
        children: children.iter().map(|c| c.derivation().clone()).collect(),
    };
    let cert = RegularityCertificate::new(state.clone(), derivation)?;
    Ok((state, cert))
}

/// `(ϑ_avg)²` with `ϑ_avg(y) = 2^{-K} Σ_E ϑ(Ey)` over all diagonal sign matrices.
#[derive(Debug, Clone)]
pub struct SignAveraged {
    inner: SmoothSquaredNorm,
}

impl SignAveraged {
    pub fn new(inner: SmoothSquaredNorm) -> Result<Self> {
        if inner.dim() > MAX_SIGN_AVERAGE_BLOCKS {
            return Err(Error::AbsolutizationCost { k: inner.dim() });
        }
        Ok(Self { inner })
    }

    fn norm_and_grad(&self, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        let k = y.len();
        let count = 1usize << k;
        let mut value = 0.0;
        let mut grad = vec![0.0; k];
        let mut ey = vec![0.0; k];
        for mask in 0..count {
            for j in 0..k {
                ey[j] = if mask >> j & 1 == 1 { -y[j] } else { y[j] };
            }
            let (f, g) = self.inner.eval_grad(&ey)?;
            let n = f.sqrt();
            value += n;
            if n > 0.0 {
                for j in 0..k {
                    let s = if mask >> j & 1 == 1 { -1.0 } else { 1.0 };
                    grad[j] += s * g[j] / (2.0 * n);
                }
            }
        }
        let c = count as f64;
        Ok((value / c, grad.into_iter().map(|v| v / c).collect()))
    }
}

impl SquaredNorm for SignAveraged {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, y: &[f64]) -> Result<f64> {
        let (n, _) = self.norm_and_grad(y)?;
        Ok(n * n)
    }

    fn value_and_grad(&self, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (n, g) = self.norm_and_grad(y)?;
        Ok((n * n, g.into_iter().map(|v| 2.0 * n * v).collect()))
    }

    fn is_absolute(&self) -> bool {
        true
    }
}

/// `f(x) = F^{1/2}(φ_1(x_1), ..., φ_K(x_K))` for an absolute surrogate `F`.
#[derive(Debug, Clone)]
pub struct AbsoluteAggregate {
    outer: SmoothSquaredNorm,
    children: Vec<SmoothSquaredNorm>,
    layout: BlockLayout,
}

impl AbsoluteAggregate {
    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    fn block_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.layout.total_dim() {
            return Err(Error::Data(format!(
                "aggregate lives on dimension {}, got a vector of length {}",
                self.layout.total_dim(),
                x.len()
            )));
        }
        self.children
            .iter()
            .enumerate()
            .map(|(i, c)| c.eval(self.layout.block(x, i)))
            .collect()
    }
}

impl SquaredNorm for AbsoluteAggregate {
    fn dim(&self) -> usize {
        self.layout.total_dim()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.outer.eval(&self.block_values(x)?)?.sqrt())
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let phi = self.block_values(x)?;
        let (f, df) = self.outer.eval_grad(&phi)?;
        let root = f.sqrt();
        let mut out = vec![0.0; x.len()];
        if root == 0.0 {
            return Ok((0.0, out));
        }
        for (i, child) in self.children.iter().enumerate() {
            let c = 0.5 * df[i] / root;
            if c == 0.0 {
                continue;
            }
            let r = self.layout.range(i);
            let g = child.grad(&x[r.clone()])?;
            for (o, gi) in out[r].iter_mut().zip(g) {
                *o = c * gi;
            }
        }
        Ok((root, out))
    }
}

/// Aggregation by a regular absolute norm `θ` whose certificate carries the
/// surrogate `F`. A non-absolute `F` is averaged over sign matrices (`K <= 16`).
pub fn aggregate_absolute(
    theta: &ThetaAggregator,
    theta_cert: &RegularityCertificate,
    children: &[RegularityCertificate],
) -> Result<(Arc<AbsoluteAggregate>, RegularityCertificate)> {
    let k = theta.arity();
    if !theta.is_absolute_norm() {
        return Err(Error::InvalidTheta(
            "absolute aggregation needs an absolute norm".into(),
        ));
    }
    if theta_cert.dim() != k || children.len() != k {
        return Err(Error::Data(format!(
            "aggregator of arity {k}, surrogate on R^{}, {} children",
            theta_cert.dim(),
            children.len()
        )));
    }
    let sign_averaged = !theta_cert.surrogate().is_absolute();
    let outer = if sign_averaged {
        if k > MAX_SIGN_AVERAGE_BLOCKS {
            return Err(Error::AbsolutizationCost { k });
        }
        let avg = SignAveraged::new(theta_cert.surrogate().clone())?;
        SmoothSquaredNorm::new(Arc::new(avg), theta_cert.kappa())?
    } else {
        theta_cert.surrogate().clone()
    };
    let kids: Vec<SmoothSquaredNorm> = children.iter().map(|c| c.surrogate().clone()).collect();
    let layout = BlockLayout::new(&kids.iter().map(SmoothSquaredNorm::dim).collect::<Vec<_>>())?;
    let agg = Arc::new(AbsoluteAggregate {
        outer,
        children: kids,
        layout,
    });
    let derivation = Derivation::AggregateAbsolute {
        sign_averaged,
        theta: Box::new(theta_cert.derivation().clone()),
        children: children.iter().map(|c| c.derivation().clone()).collect(),
    };
    let cert = RegularityCertificate::new(agg.clone(), derivation)?;
    Ok((agg, cert))
}

/// Regularity certificate for `θ` as a norm on `ℝ^K`: `ℓ_q` with `q >= 2` is
/// certified directly; `ℓ_q` with `q < 2` and positive linear forms by the
/// Euclidean norm within an explicit factor.
pub fn default_theta_certificate(theta: &ThetaAggregator) -> Result<RegularityCertificate> {
    if theta.is_unit_scaled() || theta.is_bar_augmented() {
        return Err(Error::State(
            "expected an aggregator without preprocessing".into(),
        ));
    }
    let k = theta.arity();
    match theta.form() {
        ThetaForm::Lq { q, .. } if *q >= 2.0 => lp_certificate(*q, k),
        ThetaForm::Lq { q, .. } => {
            let alpha = (k as f64).powf(1.0 / q - 0.5);
            let base = lp_certificate(2.0, k)?;
            crate::norm::approximation_certificate(&base, alpha, &format!("l_{q} vs l_2 on R^{k}"))
        }
        ThetaForm::Linear { weights } => {
            let wmin = weights.iter().fold(f64::INFINITY, |m, w| m.min(*w));
            let alpha = linalg::norm2(weights).max(1.0 / wmin).max(1.0);
            let base = lp_certificate(2.0, k)?;
            crate::norm::approximation_certificate(&base, alpha, "positive linear form vs l_2")
        }
        _ => Err(Error::InvalidTheta(
            "no default regular surrogate for this aggregator; supply a certificate".into(),
        )),
    }
}

/// Surrogate `F = ‖·‖_2²` wrapped as a shareable squared norm on `ℝ^K`.
pub fn euclidean_theta_surrogate(k: usize) -> Result<Arc<dyn SquaredNorm>> {
    Ok(Arc::new(LpSquared::new(2.0, k)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::lp_certificate;
    use crate::theta::theta_lq;
    use approx::assert_relative_eq;

    fn l2_children(k: usize, n: usize) -> Vec<RegularityCertificate> {
        (0..k).map(|_| lp_certificate(2.0, n).unwrap()).collect()
    }

    #[test]
    fn default_p_values() {
        assert_eq!(default_p(1), 1);
        assert_eq!(default_p(2), 2);
        assert_eq!(default_p(4), 2);
        assert_eq!(default_p(7), 3);
    }

    #[test]
    fn linear_theta_fixed_point_is_explicit() {
        let th = theta_lq(1.0, 2).unwrap();
        let (state, _) = aggregate_general(&th, &l2_children(2, 1), Some(1)).unwrap();
        let x = [1.0, 3f64.sqrt()];
        let r = state.t_of_x(&x).unwrap();
        // ∇θ̄ is constant, so t ∝ ω = (1, 3) normalized by θ̄(t) = 1.5 Σ t
        assert_relative_eq!(r.t[0], 1.0 / 6.0, epsilon = 1e-14);
        assert_relative_eq!(r.t[1], 0.5, epsilon = 1e-14);
        assert!(r.iterations <= 2);
    }

    #[test]
    fn single_block() {
        let th = theta_lq(1.0, 1).unwrap();
        let (state, cert) = aggregate_general(&th, &l2_children(1, 3), None).unwrap();
        let r = state.t_of_x(&[1.0, 2.0, 0.0]).unwrap();
        // θ̄(t) = 2t
        assert_relative_eq!(r.t[0], 0.5, epsilon = 1e-15);
        assert_eq!(state.p(), 1);
        assert_relative_eq!(cert.sigma(), 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn zero_input() {
        let th = theta_lq(2.0, 2).unwrap();
        let (state, _) = aggregate_general(&th, &l2_children(2, 2), None).unwrap();
        assert!(matches!(state.t_of_x(&[0.0; 4]), Err(Error::Domain(_))));
        assert_eq!(state.phi_eval(&[0.0; 4]).unwrap(), 0.0);
        assert_eq!(state.phi_grad(&[0.0; 4]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn complementarity_and_feasibility() {
        let th = theta_lq(2.0, 3).unwrap();
        let (state, _) = aggregate_general(&th, &l2_children(3, 2), None).unwrap();
        let r = state.t_of_x(&[1.0, 0.5, 0.0, 0.0, -2.0, 0.3]).unwrap();
        assert_eq!(r.t[1], 0.0);
        assert!(r.t[0] > 0.0 && r.t[2] > 0.0);
        assert!((state.theta_bar().eval(&r.t).unwrap() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn euler_identity_for_phi() {
        let th = theta_lq(3.0, 2).unwrap();
        let (state, _) = aggregate_general(&th, &l2_children(2, 2), None).unwrap();
        let x = [0.3, -1.2, 0.7, 0.1];
        let phi = state.phi_eval(&x).unwrap();
        let g = state.phi_grad(&x).unwrap();
        let p = state.p() as f64;
        assert_relative_eq!(
            linalg::dot(&x, &g),
            2.0 * (p + 1.0) * phi,
            max_relative = 1e-10
        );
    }

    #[test]
    fn certificate_constants() {
        let th = theta_lq(2.0, 4).unwrap();
        let (_, cert) = aggregate_general(&th, &l2_children(4, 3), None).unwrap();
        let (k, s) = aggregate_general_constants_for_test(4, 2, 1.0, 1.0);
        assert_eq!(cert.kappa(), k);
        assert_eq!(cert.sigma(), s);
        assert!(cert.replays_exactly());
    }

    fn aggregate_general_constants_for_test(k: usize, p: u32, ck: f64, cs: f64) -> (f64, f64) {
        let (k, p) = (k as f64, p as f64);
        (
            (p * k).powf(2.0 / (p + 1.0)) * (5.0 * p + ck),
            2f64.sqrt() * k.powf(1.0 / (2.0 * (p + 1.0))) * p.powf(1.0 / (p + 1.0)) * cs,
        )
    }

    #[test]
    fn max_theta_is_rejected() {
        let th = ThetaAggregator::new(ThetaForm::Max { arity: 2 }).unwrap();
        assert!(matches!(
            aggregate_general(&th, &l2_children(2, 1), None),
            Err(Error::InvalidTheta(_))
        ));
    }

    #[test]
    fn absolute_euclidean_of_euclidean() {
        let th = theta_lq(2.0, 3).unwrap();
        let tc = default_theta_certificate(&th).unwrap();
        let (agg, cert) = aggregate_absolute(&th, &tc, &l2_children(3, 2)).unwrap();
        assert_eq!(cert.kappa(), 3.0);
        assert_eq!(cert.sigma(), 1.0);
        let x = [1.0, 2.0, 0.0, -1.0, 3.0, 0.5];
        let n4: f64 = [5.0_f64, 1.0, 9.25].iter().map(|v| v * v).sum();
        assert_relative_eq!(agg.value(&x).unwrap(), n4.sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn sign_averaging_limits() {
        let f = SmoothSquaredNorm::new(euclidean_theta_surrogate(17).unwrap(), 1.0).unwrap();
        assert!(matches!(
            SignAveraged::new(f),
            Err(Error::AbsolutizationCost { k: 17 })
        ));
    }
}
