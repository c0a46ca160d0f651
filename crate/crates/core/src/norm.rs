//! Core types: block vectors, smooth squared norms and regularity certificates.
//!
//! A norm `‖·‖` is `(κ, ς)`-regular when some norm `𝔫` has a continuously
//! differentiable square `Φ = 𝔫²` with
//!
//! ```text
//! Φ(x + h) <= Φ(x) + ∇Φ(x)ᵀh + κ Φ(h)      for all x, h
//! ς⁻¹ 𝔫(x) <= ‖x‖ <= ς 𝔫(x)
//! ```
//!
//! [`SmoothSquaredNorm`] carries `Φ` together with its certified `κ`, and a
//! [`RegularityCertificate`] pairs it with `ς` and a [`Derivation`] tree that
//! records how the constants were composed.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;

/// A norm given by an evaluator only.
pub type NormFn = Arc<dyn Fn(&[f64]) -> Result<f64> + Send + Sync>;

/// Sizes and offsets of the blocks of `ℝ^{n_1+...+n_K}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    offsets: Vec<usize>,
}

impl BlockLayout {
    pub fn new(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Data("block layout needs at least one block".into()));
        }
        if let Some(i) = sizes.iter().position(|&n| n == 0) {
            return Err(Error::Data(format!("block {i} has dimension 0")));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        for &n in sizes {
            offsets.push(offsets.last().unwrap() + n);
        }
        Ok(Self { offsets })
    }

    pub fn num_blocks(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn block_size(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn block<'a>(&self, x: &'a [f64], i: usize) -> &'a [f64] {
        &x[self.range(i)]
    }
}

/// An element of `ℝ^{n_1+...+n_K}` stored as `K` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector {
    data: Vec<f64>,
    layout: BlockLayout,
}

impl BlockVector {
    pub fn new(blocks: &[Vec<f64>]) -> Result<Self> {
        let sizes: Vec<usize> = blocks.iter().map(Vec::len).collect();
        let layout = BlockLayout::new(&sizes)?;
        Ok(Self {
            data: blocks.concat(),
            layout,
        })
    }

    pub fn from_flat(data: Vec<f64>, layout: BlockLayout) -> Result<Self> {
        if data.len() != layout.total_dim() {
            return Err(Error::Data(format!(
                "flat vector has length {}, layout expects {}",
                data.len(),
                layout.total_dim()
            )));
        }
        Ok(Self { data, layout })
    }

    pub fn zeros(layout: BlockLayout) -> Self {
        Self {
            data: vec![0.0; layout.total_dim()],
            layout,
        }
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn num_blocks(&self) -> usize {
        self.layout.num_blocks()
    }

    pub fn total_dim(&self) -> usize {
        self.data.len()
    }

    pub fn block(&self, i: usize) -> &[f64] {
        self.layout.block(&self.data, i)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn add(&self, other: &BlockVector) -> Result<BlockVector> {
        if self.layout != other.layout {
            return Err(Error::Data("block structures differ".into()));
        }
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
            layout: self.layout.clone(),
        })
    }

    pub fn scale(&self, alpha: f64) -> BlockVector {
        Self {
            data: self.data.iter().map(|v| alpha * v).collect(),
            layout: self.layout.clone(),
        }
    }
}

/// The square `Φ = 𝔫²` of a norm with continuous gradient.
///
/// Implementations may assume `x.len() == self.dim()` and finite entries;
/// [`SmoothSquaredNorm`] checks both before delegating.
pub trait SquaredNorm: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> Result<f64>;

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Whether `Φ(Ex) = Φ(x)` for every diagonal sign matrix `E`.
    fn is_absolute(&self) -> bool {
        false
    }

    /// Closed-form `argmin_x { cᵀx + Φ(x) }` when one is known.
    fn linear_prox(&self, _c: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// A smooth squared norm with its certified smoothness constant `κ >= 1`.
#[derive(Clone)]
pub struct SmoothSquaredNorm {
    inner: Arc<dyn SquaredNorm>,
    kappa: f64,
}

impl fmt::Debug for SmoothSquaredNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothSquaredNorm")
            .field("kappa", &self.kappa)
            .field("inner", &self.inner)
            .finish()
    }
}

impl SmoothSquaredNorm {
    pub fn new(inner: Arc<dyn SquaredNorm>, kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa >= 1.0) {
            return Err(Error::Domain(format!(
                "smoothness constant {kappa} must be >= 1"
            )));
        }
        Ok(Self { inner, kappa })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.inner.dim()
    }

    pub fn inner(&self) -> &Arc<dyn SquaredNorm> {
        &self.inner
    }

    pub fn is_absolute(&self) -> bool {
        self.inner.is_absolute()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Data(format!(
                "vector of length {} given to a squared norm on dimension {}",
                x.len(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite entry".into()));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        self.inner.value(x)
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self.inner.value_and_grad(x)?.1)
    }

    pub fn eval_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check(x)?;
        self.inner.value_and_grad(x)
    }

    /// The surrogate norm `𝔫(x) = Φ(x)^{1/2}`.
    pub fn norm(&self, x: &[f64]) -> Result<f64> {
        Ok(self.eval(x)?.max(0.0).sqrt())
    }

    pub fn linear_prox(&self, c: &[f64]) -> Option<Vec<f64>> {
        self.inner.linear_prox(c)
    }
}

/// How the gradient of an aggregator was obtained; recorded in certificates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSource {
    Analytic,
    FiniteDifference,
}

/// Composition tree of a certificate. Replaying it recomputes `(κ, ς)` with
/// the same floating-point operations used when the certificate was built.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Derivation {
    /// Constants supplied by the caller.
    Given {
        label: String,
        kappa: f64,
        sigma: f64,
    },
    /// `‖·‖_p`, `2 <= p < ∞`, is `(p-1)`-smooth.
    LpSmooth { p: f64, n: usize },
    /// Schatten-p, `2 <= p < ∞`, is `max(2, p-1)`-smooth.
    SchattenSmooth { p: f64, m: usize, n: usize },
    /// `‖·‖_q` standing in for `‖·‖_∞` on `ℝⁿ`.
    LinfSurrogate { n: usize, q: f64 },
    /// Schatten-q standing in for the spectral norm, `d = min(m, n)`.
    SpectralSurrogate { m: usize, n: usize, q: f64 },
    /// `y ↦ ‖Ay‖` with `Ker A = {0}`.
    Pullback {
        rows: usize,
        cols: usize,
        child: Box<Derivation>,
    },
    /// A norm within factor `alpha` of the certified one.
    Approximation {
        alpha: f64,
        reason: String,
        child: Box<Derivation>,
    },
    /// Factor norm under an onto map.
    Quotient {
        rows: usize,
        cols: usize,
        child: Box<Derivation>,
    },
    /// `θ`-aggregation of arbitrary regular norms through the `t(x)` minimizer.
    AggregateGeneral {
        blocks: usize,
        p: u32,
        gradient: GradientSource,
        zero_block_rtol: f64,
        children: Vec<Derivation>,
    },
    /// Aggregation by a regular absolute norm `θ` with surrogate `F`.
    AggregateAbsolute {
        sign_averaged: bool,
        theta: Box<Derivation>,
        children: Vec<Derivation>,
    },
}

/// `(κ, ς)` of the general aggregation rule for `K` blocks and exponent `p`.
pub fn aggregate_general_constants(
    blocks: usize,
    p: u32,
    child_kappa: f64,
    child_sigma: f64,
) -> (f64, f64) {
    let k = blocks as f64;
    let p = p as f64;
    let kappa = (p * k).powf(2.0 / (p + 1.0)) * (5.0 * p + child_kappa);
    let sigma = std::f64::consts::SQRT_2
        * k.powf(1.0 / (2.0 * (p + 1.0)))
        * p.powf(1.0 / (p + 1.0))
        * child_sigma;
    (kappa, sigma)
}

/// `(2κ̄ + κ', ς' √ς̄)` of the absolute-norm aggregation rule.
pub fn aggregate_absolute_constants(
    theta_kappa: f64,
    theta_sigma: f64,
    child_kappa: f64,
    child_sigma: f64,
) -> (f64, f64) {
    (
        2.0 * theta_kappa + child_kappa,
        child_sigma * theta_sigma.sqrt(),
    )
}

fn max_constants(children: &[Derivation]) -> (f64, f64) {
    children
        .iter()
        .map(Derivation::replay)
        .fold((1.0_f64, 1.0_f64), |(k, s), (ck, cs)| {
            (k.max(ck), s.max(cs))
        })
}

impl Derivation {
    /// Recomputes `(κ, ς)` from the recorded rules.
    pub fn replay(&self) -> (f64, f64) {
        match self {
            Derivation::Given { kappa, sigma, .. } => (*kappa, *sigma),
            Derivation::LpSmooth { p, .. } => (p - 1.0, 1.0),
            Derivation::SchattenSmooth { p, .. } => ((p - 1.0).max(2.0), 1.0),
            Derivation::LinfSurrogate { n, q } => (q - 1.0, (*n as f64).powf(1.0 / q)),
            Derivation::SpectralSurrogate { m, n, q } => {
                ((q - 1.0).max(2.0), (*m.min(n) as f64).powf(1.0 / q))
            }
            Derivation::Pullback { child, .. } | Derivation::Quotient { child, .. } => {
                child.replay()
            }
            Derivation::Approximation { alpha, child, .. } => {
                let (k, s) = child.replay();
                (k, alpha * s)
            }
            Derivation::AggregateGeneral {
                blocks,
                p,
                children,
                ..
            } => {
                let (ck, cs) = max_constants(children);
                aggregate_general_constants(*blocks, *p, ck, cs)
            }
            Derivation::AggregateAbsolute {
                theta, children, ..
            } => {
                let (tk, ts) = theta.replay();
                let (ck, cs) = max_constants(children);
                aggregate_absolute_constants(tk, ts, ck, cs)
            }
        }
    }

    /// Human-readable steps, children before parents.
    pub fn steps(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_steps(0, &mut out);
        out
    }

    fn collect_steps(&self, depth: usize, out: &mut Vec<String>) {
        let pad = "  ".repeat(depth);
        let (k, s) = self.replay();
        let line = match self {
            Derivation::Given { label, .. } => format!("given constants for {label}"),
            Derivation::LpSmooth { p, n } => {
                format!("l_{p} on R^{n} is (p-1)-smooth: kappa factor {}", p - 1.0)
            }
            Derivation::SchattenSmooth { p, m, n } => format!(
                "Schatten-{p} on R^{m}x{n} is max(2,p-1)-smooth: kappa factor {}",
                (p - 1.0).max(2.0)
            ),
            Derivation::LinfSurrogate { n, q } => format!(
                "l_{q} surrogate of l_inf on R^{n}: kappa = q-1, sigma = n^(1/q) = {}",
                (*n as f64).powf(1.0 / q)
            ),
            Derivation::SpectralSurrogate { m, n, q } => format!(
                "Schatten-{q} surrogate of the spectral norm on R^{m}x{n}: sigma = min(m,n)^(1/q) = {}",
                (*m.min(n) as f64).powf(1.0 / q)
            ),
            Derivation::Pullback { rows, cols, .. } => {
                format!("pullback through a {rows}x{cols} embedding: constants unchanged")
            }
            Derivation::Approximation { alpha, reason, .. } => {
                format!("approximation within factor {alpha} ({reason}): sigma multiplied by {alpha}")
            }
            Derivation::Quotient { rows, cols, .. } => {
                format!("factor norm under a {rows}x{cols} onto map: constants unchanged")
            }
            Derivation::AggregateGeneral {
                blocks,
                p,
                gradient,
                zero_block_rtol,
                children,
            } => {
                let (ck, cs) = max_constants(children);
                let kf = ((*p as f64) * (*blocks as f64)).powf(2.0 / (*p as f64 + 1.0));
                format!(
                    "general aggregation of K={blocks} blocks with p={p}: kappa = (pK)^(2/(p+1)) * (5p + {ck}) with (pK)^(2/(p+1)) = {kf}; \
                     sigma = sqrt(2) * K^(1/(2(p+1))) * p^(1/(p+1)) * {cs}; aggregator gradient {gradient:?}; zero-block threshold {zero_block_rtol:e}"
                )
            }
            Derivation::AggregateAbsolute {
                sign_averaged,
                theta,
                children,
            } => {
                let (tk, ts) = theta.replay();
                let (ck, cs) = max_constants(children);
                format!(
                    "absolute-norm aggregation: kappa = 2*{tk} + {ck}, sigma = {cs} * sqrt({ts}){}",
                    if *sign_averaged { "; surrogate averaged over sign matrices" } else { "" }
                )
            }
        };
        match self {
            Derivation::Pullback { child, .. }
            | Derivation::Quotient { child, .. }
            | Derivation::Approximation { child, .. } => child.collect_steps(depth + 1, out),
            Derivation::AggregateGeneral { children, .. } => {
                for c in children {
                    c.collect_steps(depth + 1, out);
                }
            }
            Derivation::AggregateAbsolute {
                theta, children, ..
            } => {
                theta.collect_steps(depth + 1, out);
                for c in children {
                    c.collect_steps(depth + 1, out);
                }
            }
            _ => {}
        }
        out.push(format!("{pad}{line} => (kappa={k}, sigma={s})"));
    }
}

/// A certified pair `(κ, ς)` together with the surrogate it refers to.
#[derive(Debug, Clone)]
pub struct RegularityCertificate {
    kappa: f64,
    sigma: f64,
    surrogate: SmoothSquaredNorm,
    derivation: Derivation,
}

impl RegularityCertificate {
    /// Builds a certificate whose constants are the replay of `derivation`.
    pub fn new(surrogate: Arc<dyn SquaredNorm>, derivation: Derivation) -> Result<Self> {
        let (kappa, sigma) = derivation.replay();
        if !(sigma.is_finite() && sigma >= 1.0) {
            return Err(Error::Domain(format!(
                "sandwich factor {sigma} must be >= 1"
            )));
        }
        let surrogate = SmoothSquaredNorm::new(surrogate, kappa)?;
        Ok(Self {
            kappa,
            sigma,
            surrogate,
            derivation,
        })
    }

    /// A certificate from constants supplied by the caller.
    pub fn given(
        surrogate: Arc<dyn SquaredNorm>,
        label: impl Into<String>,
        kappa: f64,
        sigma: f64,
    ) -> Result<Self> {
        Self::new(
            surrogate,
            Derivation::Given {
                label: label.into(),
                kappa,
                sigma,
            },
        )
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn surrogate(&self) -> &SmoothSquaredNorm {
        &self.surrogate
    }

    pub fn derivation(&self) -> &Derivation {
        &self.derivation
    }

    pub fn dim(&self) -> usize {
        self.surrogate.dim()
    }

    pub fn trace(&self) -> Vec<String> {
        self.derivation.steps()
    }

    /// True when replaying the derivation reproduces the stored constants bit for bit.
    pub fn replays_exactly(&self) -> bool {
        let (k, s) = self.derivation.replay();
        k.to_bits() == self.kappa.to_bits() && s.to_bits() == self.sigma.to_bits()
    }
}

/// `Φ_A(y) = Φ(Ay)` for an embedding `A`.
#[derive(Debug)]
pub struct PullbackSquared {
    a: DMatrix<f64>,
    inner: SmoothSquaredNorm,
}

impl PullbackSquared {
    pub fn new(a: DMatrix<f64>, inner: SmoothSquaredNorm) -> Result<Self> {
        if a.nrows() != inner.dim() {
            return Err(Error::Data(format!(
                "embedding has {} rows, surrogate lives on dimension {}",
                a.nrows(),
                inner.dim()
            )));
        }
        linalg::require_full_column_rank(&a, "pullback map")?;
        Ok(Self { a, inner })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }
}

impl SquaredNorm for PullbackSquared {
    fn dim(&self) -> usize {
        self.a.ncols()
    }

    fn value(&self, y: &[f64]) -> Result<f64> {
        self.inner.eval(&linalg::mat_vec(&self.a, y))
    }

    fn value_and_grad(&self, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.inner.eval_grad(&linalg::mat_vec(&self.a, y))?;
        Ok((v, linalg::mat_t_vec(&self.a, &g)))
    }
}

/// Certificate for `y ↦ ‖Ay‖` given one for `‖·‖`; constants are unchanged.
pub fn pullback_certificate(
    cert: &RegularityCertificate,
    a: &DMatrix<f64>,
) -> Result<RegularityCertificate> {
    let inner = PullbackSquared::new(a.clone(), cert.surrogate().clone())?;
    RegularityCertificate::new(
        Arc::new(inner),
        Derivation::Pullback {
            rows: a.nrows(),
            cols: a.ncols(),
            child: Box::new(cert.derivation().clone()),
        },
    )
}

/// Certificate for a norm within factor `alpha >= 1` of a certified one.
pub fn approximation_certificate(
    cert: &RegularityCertificate,
    alpha: f64,
    reason: &str,
) -> Result<RegularityCertificate> {
    if !(alpha.is_finite() && alpha >= 1.0) {
        return Err(Error::Domain(format!(
            "approximation factor {alpha} must be >= 1"
        )));
    }
    RegularityCertificate::new(
        cert.surrogate().inner().clone(),
        Derivation::Approximation {
            alpha,
            reason: reason.to_string(),
            child: Box::new(cert.derivation().clone()),
        },
    )
}
