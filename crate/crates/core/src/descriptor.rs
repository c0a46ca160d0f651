//! Closed algebra of norm definitions.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::aggregation::{aggregate_absolute, aggregate_general, default_theta_certificate};
use crate::catalog::{
    lp_certificate, lp_norm, schatten_certificate, schatten_norm, smooth_surrogate_for_linf,
    smooth_surrogate_for_spectral,
};
use crate::error::{Error, Result};
use crate::geometry::{Ellitope, Spectratope};
use crate::linalg;
use crate::norm::{pullback_certificate, NormFn, RegularityCertificate};
use crate::quotient::{quotient_certificate, QuotientMode, QuotientNorm};
use crate::theta::ThetaAggregator;

/// How an aggregate is certified.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationRule {
    /// The `t(x)` construction, valid for every differentiable monotone `θ`;
    /// `p` overrides the default exponent.
    General { p: Option<u32> },
    /// Composition with a regular surrogate of an absolute norm `θ`.
    Absolute,
}

#[derive(Debug, Clone)]
pub enum NormDescriptor {
    /// `‖·‖_p` on `ℝⁿ`, `p ∈ [2, ∞]`.
    Lp {
        p: f64,
        n: usize,
    },
    /// Schatten-p on row-major `m × n` matrices, `p ∈ [2, ∞]`.
    Schatten {
        p: f64,
        m: usize,
        n: usize,
    },
    /// `y ↦ ‖Ay‖` for `A` with trivial kernel.
    Pullback {
        a: DMatrix<f64>,
        child: Box<NormDescriptor>,
    },
    /// `θ^{1/2}(‖x_1‖_1², ..., ‖x_K‖_K²)`.
    Aggregate {
        theta: ThetaAggregator,
        children: Vec<NormDescriptor>,
        rule: AggregationRule,
    },
    /// `min{‖x‖ : Px = u}` for onto `P`.
    Quotient {
        p: DMatrix<f64>,
        child: Box<NormDescriptor>,
    },
    Ellitope(Ellitope),
    Spectratope(Spectratope),
}

impl NormDescriptor {
    pub fn dim(&self) -> usize {
        match self {
            NormDescriptor::Lp { n, .. } => *n,
            NormDescriptor::Schatten { m, n, .. } => m * n,
            NormDescriptor::Pullback { a, .. } => a.ncols(),
            NormDescriptor::Aggregate { children, .. } => children.iter().map(Self::dim).sum(),
            NormDescriptor::Quotient { p, .. } => p.nrows(),
            NormDescriptor::Ellitope(e) => e.dim(),
            NormDescriptor::Spectratope(s) => s.dim(),
        }
    }

    /// Structural checks: exponents, dimensions and rank conditions.
    pub fn validate(&self) -> Result<()> {
        match self {
            NormDescriptor::Lp { p, n } | NormDescriptor::Schatten { p, n, .. } => {
                if !(*p >= 2.0) {
                    return Err(Error::Domain(format!("exponent {p} outside [2, inf]")));
                }
                if *n == 0 {
                    return Err(Error::Data("dimension must be positive".into()));
                }
                if let NormDescriptor::Schatten { m: 0, .. } = self {
                    return Err(Error::Data("dimension must be positive".into()));
                }
            }
            NormDescriptor::Pullback { a, child } => {
                child.validate()?;
                if a.nrows() != child.dim() {
                    return Err(Error::Data(format!(
                        "embedding has {} rows, child lives on dimension {}",
                        a.nrows(),
                        child.dim()
                    )));
                }
                linalg::require_full_column_rank(a, "pullback map")?;
            }
            NormDescriptor::Aggregate {
                theta, children, ..
            } => {
                if theta.arity() != children.len() {
                    return Err(Error::Data(format!(
                        "aggregator of arity {} with {} children",
                        theta.arity(),
                        children.len()
                    )));
                }
                for c in children {
                    c.validate()?;
                }
            }
            NormDescriptor::Quotient { p, child } => {
                child.validate()?;
                if p.ncols() != child.dim() {
                    return Err(Error::Data(format!(
                        "map has {} columns, child lives on dimension {}",
                        p.ncols(),
                        child.dim()
                    )));
                }
                linalg::require_full_row_rank(p, "quotient map")?;
            }
            NormDescriptor::Ellitope(_) | NormDescriptor::Spectratope(_) => {}
        }
        Ok(())
    }

    /// Evaluator for the exact norm. Factor norms are solved numerically.
    pub fn norm_fn(&self) -> Result<NormFn> {
        self.validate()?;
        Ok(match self {
            NormDescriptor::Lp { p, n } => {
                let (p, n) = (*p, *n);
                Arc::new(move |x: &[f64]| {
                    check_len(x, n)?;
                    Ok(lp_norm(p, x))
                })
            }
            NormDescriptor::Schatten { p, m, n } => {
                let (p, m, n) = (*p, *m, *n);
                Arc::new(move |x: &[f64]| schatten_norm(p, m, n, x))
            }
            NormDescriptor::Pullback { a, child } => {
                let a = a.clone();
                let inner = child.norm_fn()?;
                Arc::new(move |y: &[f64]| {
                    check_len(y, a.ncols())?;
                    inner(&linalg::mat_vec(&a, y))
                })
            }
            NormDescriptor::Aggregate {
                theta, children, ..
            } => {
                let theta = theta.clone();
                let sizes: Vec<usize> = children.iter().map(Self::dim).collect();
                let kids: Vec<NormFn> =
                    children.iter().map(Self::norm_fn).collect::<Result<_>>()?;
                let total: usize = sizes.iter().sum();
                Arc::new(move |x: &[f64]| {
                    check_len(x, total)?;
                    let mut off = 0;
                    let mut t = Vec::with_capacity(kids.len());
                    for (k, size) in kids.iter().zip(&sizes) {
                        let v = k(&x[off..off + size])?;
                        t.push(v * v);
                        off += size;
                    }
                    Ok(theta.eval(&t)?.sqrt())
                })
            }
            NormDescriptor::Quotient { p, child } => {
                let cert = child.certificate()?;
                let qn =
                    QuotientNorm::new(p.clone(), cert.surrogate().clone(), Some(child.norm_fn()?))?;
                Arc::new(move |u: &[f64]| Ok(qn.eval(u, QuotientMode::Original)?.value))
            }
            NormDescriptor::Ellitope(e) => e.norm_fn()?,
            NormDescriptor::Spectratope(s) => s.norm_fn()?,
        })
    }

    pub fn norm(&self, x: &[f64]) -> Result<f64> {
        (self.norm_fn()?)(x)
    }

    /// Regularity certificate with its smooth surrogate.
    pub fn certificate(&self) -> Result<RegularityCertificate> {
        self.validate()?;
        match self {
            NormDescriptor::Lp { p, n } if p.is_infinite() => Ok(smooth_surrogate_for_linf(*n)?.1),
            NormDescriptor::Lp { p, n } => lp_certificate(*p, *n),
            NormDescriptor::Schatten { p, m, n } if p.is_infinite() => {
                Ok(smooth_surrogate_for_spectral(*m, *n)?.1)
            }
            NormDescriptor::Schatten { p, m, n } => schatten_certificate(*p, *m, *n),
            NormDescriptor::Pullback { a, child } => pullback_certificate(&child.certificate()?, a),
            NormDescriptor::Aggregate {
                theta,
                children,
                rule,
            } => {
                let certs: Vec<RegularityCertificate> = children
                    .iter()
                    .map(Self::certificate)
                    .collect::<Result<_>>()?;
                match rule {
                    AggregationRule::General { p } => Ok(aggregate_general(theta, &certs, *p)?.1),
                    AggregationRule::Absolute => {
                        let tc = default_theta_certificate(theta)?;
                        Ok(aggregate_absolute(theta, &tc, &certs)?.1)
                    }
                }
            }
            NormDescriptor::Quotient { p, child } => quotient_certificate(&child.certificate()?, p),
            NormDescriptor::Ellitope(e) => e.regular_surrogate(),
            NormDescriptor::Spectratope(s) => s.regular_surrogate(),
        }
    }
}

fn check_len(x: &[f64], n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::Data(format!("expected length {n}, got {}", x.len())));
    }
    Ok(())
}
