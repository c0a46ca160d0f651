//! Aggregators `θ` on `ℝ^K_+` and the preprocessing used by general aggregation.
//!
//! An aggregator is monotone, positively homogeneous of degree one and
//! positive off the origin. The general aggregation engine additionally needs
//! `θ` differentiable on the open orthant, unit axis extents
//! (`max{t_i : θ(t) <= 1} = 1`, obtained by [`unit_scale`]) and gradient
//! entries bounded in `[1/K, 1 + 1/K]` (obtained by [`bar_augment`]).

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::catalog::lp_norm;
use crate::error::{Error, Result};
use crate::norm::GradientSource;

pub type ThetaFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type ThetaGradFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// A user-supplied aggregator.
#[derive(Clone)]
pub struct CustomTheta {
    pub arity: usize,
    pub eval: ThetaFn,
    /// Analytic gradient; central finite differences are used when absent.
    pub grad: Option<ThetaGradFn>,
    pub absolute_norm: bool,
    pub label: String,
}

impl fmt::Debug for CustomTheta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomTheta")
            .field("label", &self.label)
            .field("arity", &self.arity)
            .field("analytic_grad", &self.grad.is_some())
            .finish()
    }
}

/// Structural description of `θ`.
#[derive(Debug, Clone)]
pub enum ThetaForm {
    /// `‖t‖_q`, `q >= 1`.
    Lq {
        q: f64,
        arity: usize,
    },
    /// `Σ w_i t_i` with `w > 0`.
    Linear {
        weights: Vec<f64>,
    },
    /// `max_i t_i`. Not differentiable; usable for norm values only.
    Max {
        arity: usize,
    },
    /// `outer(θ_1(t¹), ..., θ_m(tᵐ))` over consecutive slices of `t`.
    Nested {
        outer: Box<ThetaForm>,
        parts: Vec<ThetaForm>,
    },
    Custom(CustomTheta),
}

impl ThetaForm {
    pub fn arity(&self) -> usize {
        match self {
            ThetaForm::Lq { arity, .. } | ThetaForm::Max { arity } => *arity,
            ThetaForm::Linear { weights } => weights.len(),
            ThetaForm::Nested { parts, .. } => parts.iter().map(ThetaForm::arity).sum(),
            ThetaForm::Custom(c) => c.arity,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ThetaForm::Lq { q, arity } => {
                if !(q.is_finite() && *q >= 1.0) {
                    return Err(Error::Domain(format!(
                        "l_q aggregator needs q in [1, inf), got {q}"
                    )));
                }
                if *arity == 0 {
                    return Err(Error::InvalidTheta("arity must be positive".into()));
                }
            }
            ThetaForm::Linear { weights } => {
                if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                    return Err(Error::InvalidTheta(
                        "linear weights must be positive".into(),
                    ));
                }
            }
            ThetaForm::Max { arity } => {
                if *arity == 0 {
                    return Err(Error::InvalidTheta("arity must be positive".into()));
                }
            }
            ThetaForm::Nested { outer, parts } => {
                if outer.arity() != parts.len() {
                    return Err(Error::InvalidTheta(format!(
                        "outer aggregator has arity {} but {} parts were given",
                        outer.arity(),
                        parts.len()
                    )));
                }
                outer.validate()?;
                for p in parts {
                    p.validate()?;
                }
            }
            ThetaForm::Custom(c) => {
                if c.arity == 0 {
                    return Err(Error::InvalidTheta("arity must be positive".into()));
                }
            }
        }
        Ok(())
    }

    fn eval(&self, t: &[f64]) -> f64 {
        match self {
            ThetaForm::Lq { q, .. } => lp_norm(*q, t),
            ThetaForm::Linear { weights } => weights.iter().zip(t).map(|(w, v)| w * v).sum(),
            ThetaForm::Max { .. } => t.iter().fold(0.0_f64, |m, v| m.max(*v)),
            ThetaForm::Nested { outer, parts } => {
                let inner = self.part_values(parts, t);
                outer.eval(&inner)
            }
            ThetaForm::Custom(c) => (c.eval)(t),
        }
    }

    fn part_values(&self, parts: &[ThetaForm], t: &[f64]) -> Vec<f64> {
        let mut off = 0;
        parts
            .iter()
            .map(|p| {
                let k = p.arity();
                let v = p.eval(&t[off..off + k]);
                off += k;
                v
            })
            .collect()
    }

    /// Partial derivatives at `t >= 0, t != 0` with respect to the support
    /// coordinates of `t`. Entries off the support are unspecified (zero or
    /// the one-sided limit).
    fn face_grad(&self, t: &[f64]) -> Result<Vec<f64>> {
        match self {
            ThetaForm::Lq { q, .. } => {
                let r = lp_norm(*q, t);
                if r == 0.0 {
                    return Err(Error::Domain(
                        "aggregator gradient requested at the origin".into(),
                    ));
                }
                if *q == 1.0 {
                    return Ok(vec![1.0; t.len()]);
                }
                Ok(t.iter().map(|v| (v / r).powf(q - 1.0)).collect())
            }
            ThetaForm::Linear { weights } => Ok(weights.clone()),
            ThetaForm::Max { .. } => Err(Error::InvalidTheta(
                "max aggregator is not differentiable".into(),
            )),
            ThetaForm::Nested { outer, parts } => {
                let inner = self.part_values(parts, t);
                let og = outer.face_grad(&inner)?;
                let mut out = Vec::with_capacity(t.len());
                let mut off = 0;
                for (j, p) in parts.iter().enumerate() {
                    let k = p.arity();
                    let slice = &t[off..off + k];
                    if inner[j] > 0.0 {
                        out.extend(p.face_grad(slice)?.into_iter().map(|g| og[j] * g));
                    } else {
                        out.extend(std::iter::repeat_n(0.0, k));
                    }
                    off += k;
                }
                Ok(out)
            }
            ThetaForm::Custom(c) => match &c.grad {
                Some(g) => Ok(g(t)),
                None => Ok(fd_face_grad(&*c.eval, t)),
            },
        }
    }

    fn is_absolute_norm(&self) -> bool {
        match self {
            ThetaForm::Lq { .. } | ThetaForm::Linear { .. } | ThetaForm::Max { .. } => true,
            ThetaForm::Nested { outer, parts } => {
                outer.is_absolute_norm() && parts.iter().all(ThetaForm::is_absolute_norm)
            }
            ThetaForm::Custom(c) => c.absolute_norm,
        }
    }

    fn is_differentiable(&self) -> bool {
        match self {
            ThetaForm::Max { .. } => false,
            ThetaForm::Nested { outer, parts } => {
                outer.is_differentiable() && parts.iter().all(ThetaForm::is_differentiable)
            }
            _ => true,
        }
    }

    fn gradient_source(&self) -> GradientSource {
        match self {
            ThetaForm::Custom(CustomTheta { grad: None, .. }) => GradientSource::FiniteDifference,
            ThetaForm::Nested { outer, parts } => {
                if outer.gradient_source() == GradientSource::FiniteDifference
                    || parts
                        .iter()
                        .any(|p| p.gradient_source() == GradientSource::FiniteDifference)
                {
                    GradientSource::FiniteDifference
                } else {
                    GradientSource::Analytic
                }
            }
            _ => GradientSource::Analytic,
        }
    }

    fn is_custom(&self) -> bool {
        match self {
            ThetaForm::Custom(_) => true,
            ThetaForm::Nested { outer, parts } => {
                outer.is_custom() || parts.iter().any(ThetaForm::is_custom)
            }
            _ => false,
        }
    }
}

/// Central differences with step `1e-7 ‖t‖_∞`, shrunk so support
/// coordinates never leave the orthant.
fn fd_face_grad(f: &(dyn Fn(&[f64]) -> f64 + Send + Sync), t: &[f64]) -> Vec<f64> {
    let scale = t.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let base = 1e-7 * scale;
    let mut work = t.to_vec();
    (0..t.len())
        .map(|i| {
            if t[i] <= 0.0 {
                return 0.0;
            }
            let h = base.min(0.5 * t[i]);
            work[i] = t[i] + h;
            let fp = f(&work);
            work[i] = t[i] - h;
            let fm = f(&work);
            work[i] = t[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Aggregator `θ` together with its preprocessing state.
#[derive(Debug, Clone)]
pub struct ThetaAggregator {
    form: ThetaForm,
    /// Diagonal `D` of the unit scaling; the aggregator evaluates `θ(Dt)`.
    scale: Option<Vec<f64>>,
    bar_augmented: bool,
}

impl ThetaAggregator {
    pub fn new(form: ThetaForm) -> Result<Self> {
        form.validate()?;
        Ok(Self {
            form,
            scale: None,
            bar_augmented: false,
        })
    }

    pub fn form(&self) -> &ThetaForm {
        &self.form
    }

    pub fn arity(&self) -> usize {
        self.form.arity()
    }

    pub fn scale(&self) -> Option<&[f64]> {
        self.scale.as_deref()
    }

    pub fn is_unit_scaled(&self) -> bool {
        self.scale.is_some()
    }

    pub fn is_bar_augmented(&self) -> bool {
        self.bar_augmented
    }

    pub fn is_absolute_norm(&self) -> bool {
        !self.bar_augmented && self.form.is_absolute_norm()
    }

    pub fn is_differentiable_off_origin(&self) -> bool {
        self.form.is_differentiable()
    }

    pub fn gradient_source(&self) -> GradientSource {
        self.form.gradient_source()
    }

    pub fn is_custom(&self) -> bool {
        self.form.is_custom()
    }

    fn scaled(&self, t: &[f64]) -> Vec<f64> {
        match &self.scale {
            Some(d) => t.iter().zip(d).map(|(v, s)| v * s).collect(),
            None => t.to_vec(),
        }
    }

    fn check(&self, t: &[f64]) -> Result<()> {
        if t.len() != self.arity() {
            return Err(Error::Data(format!(
                "aggregator of arity {} applied to {} entries",
                self.arity(),
                t.len()
            )));
        }
        if t.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain(
                "aggregator arguments must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// `θ(t)` for `t >= 0`.
    pub fn eval(&self, t: &[f64]) -> Result<f64> {
        self.check(t)?;
        Ok(self.eval_unchecked(t))
    }

    pub(crate) fn eval_unchecked(&self, t: &[f64]) -> f64 {
        let base = self.form.eval(&self.scaled(t));
        if self.bar_augmented {
            base + t.iter().sum::<f64>() / self.arity() as f64
        } else {
            base
        }
    }

    /// `∇θ(t)` for strictly positive `t`; boundary points are rejected.
    pub fn grad(&self, t: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        if t.iter().any(|v| *v <= 0.0) {
            return Err(Error::Domain(
                "aggregator gradient is only available on the open positive orthant".into(),
            ));
        }
        self.face_grad(t)
    }

    /// Partial derivatives along the support of `t >= 0, t != 0`.
    pub(crate) fn face_grad(&self, t: &[f64]) -> Result<Vec<f64>> {
        let d = self.scaled(t);
        let mut g = self.form.face_grad(&d)?;
        if let Some(s) = &self.scale {
            for (gi, si) in g.iter_mut().zip(s) {
                *gi *= si;
            }
        }
        if self.bar_augmented {
            let k = self.arity() as f64;
            for gi in g.iter_mut() {
                *gi += 1.0 / k;
            }
        }
        Ok(g)
    }

    /// Sampled check of homogeneity, monotonicity, positivity and the Euler
    /// identity `tᵀ∇θ(t) = θ(t)`; returns the first violated property.
    pub fn validate_by_sampling(&self, samples: usize, seed: u64) -> Result<()> {
        let k = self.arity();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rtol = if self.gradient_source() == GradientSource::FiniteDifference {
            1e-5
        } else {
            1e-9
        };
        for _ in 0..samples {
            let t: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..2.0)).collect();
            let v = self.eval_unchecked(&t);
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidTheta(format!(
                    "theta({t:?}) = {v} is not positive"
                )));
            }
            let lam: f64 = rng.random_range(0.1..10.0);
            let tl: Vec<f64> = t.iter().map(|x| lam * x).collect();
            let vl = self.eval_unchecked(&tl);
            if (vl - lam * v).abs() > 1e-9 * lam * v {
                return Err(Error::InvalidTheta(format!("not homogeneous at {t:?}")));
            }
            let bump: Vec<f64> = t.iter().map(|x| x + rng.random_range(0.0..1.0)).collect();
            if self.eval_unchecked(&bump) < v * (1.0 - 1e-12) {
                return Err(Error::InvalidTheta(format!("not monotone at {t:?}")));
            }
            if self.is_differentiable_off_origin() {
                let g = self.face_grad(&t)?;
                let euler: f64 = g.iter().zip(&t).map(|(a, b)| a * b).sum();
                if (euler - v).abs() > rtol * v {
                    return Err(Error::InvalidTheta(format!(
                        "Euler identity fails at {t:?}: {euler} vs {v}"
                    )));
                }
            }
        }
        for i in 0..k {
            let mut e = vec![0.0; k];
            e[i] = 1.0;
            if self.eval_unchecked(&e) <= 0.0 {
                return Err(Error::InvalidTheta(format!("theta(e_{i}) <= 0")));
            }
        }
        Ok(())
    }
}

/// `θ(t) = ‖t‖_q` on `ℝ^K_+`.
pub fn theta_lq(q: f64, arity: usize) -> Result<ThetaAggregator> {
    if !(q >= 1.0) || !q.is_finite() {
        return Err(Error::Domain(format!(
            "l_q aggregator needs q in [1, inf), got {q}"
        )));
    }
    ThetaAggregator::new(ThetaForm::Lq { q, arity })
}

/// Rescales `θ` to `θ∘D`, `D = diag(1/θ(e_i))`, so every axis extent
/// `max{t_i : θ(t) <= 1}` equals one.
pub fn unit_scale(theta: &ThetaAggregator) -> Result<ThetaAggregator> {
    if theta.bar_augmented {
        return Err(Error::State(
            "unit scaling must precede bar augmentation".into(),
        ));
    }
    let k = theta.arity();
    let mut scale = theta.scale.clone().unwrap_or_else(|| vec![1.0; k]);
    for i in 0..k {
        let mut e = vec![0.0; k];
        e[i] = 1.0;
        let v = theta.eval_unchecked(&e);
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidTheta(format!(
                "theta(e_{i}) = {v} must be positive"
            )));
        }
        // maximum of t_i over {θ <= 1} is attained on the axis: 1/θ(e_i)
        if v != 1.0 {
            scale[i] /= v;
        }
    }
    Ok(ThetaAggregator {
        form: theta.form.clone(),
        scale: Some(scale),
        bar_augmented: false,
    })
}

/// `θ̄(t) = θ(t) + K⁻¹ Σ t_i` for a unit-scaled `θ`.
pub fn bar_augment(theta: &ThetaAggregator) -> Result<ThetaAggregator> {
    if theta.scale.is_none() {
        return Err(Error::State(
            "bar augmentation requires a unit-scaled aggregator".into(),
        ));
    }
    if theta.bar_augmented {
        return Err(Error::State("aggregator is already bar-augmented".into()));
    }
    Ok(ThetaAggregator {
        form: theta.form.clone(),
        scale: theta.scale.clone(),
        bar_augmented: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn linear(w: &[f64]) -> ThetaAggregator {
        ThetaAggregator::new(ThetaForm::Linear {
            weights: w.to_vec(),
        })
        .unwrap()
    }

    #[test]
    fn lq_sum_aggregator() {
        let th = theta_lq(1.0, 3).unwrap();
        assert_eq!(th.eval(&[1.0, 2.0, 3.0]).unwrap(), 6.0);
        assert_eq!(th.grad(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn lq_euclidean() {
        let th = theta_lq(2.0, 2).unwrap();
        assert_relative_eq!(th.eval(&[3.0, 4.0]).unwrap(), 5.0, epsilon = 1e-15);
        let g = th.grad(&[3.0, 4.0]).unwrap();
        assert_relative_eq!(g[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(g[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn lq_fractional_matches_finite_differences() {
        let th = theta_lq(1.5, 2).unwrap();
        let t = [1.0, 1.0];
        assert_relative_eq!(th.eval(&t).unwrap(), 2f64.powf(2.0 / 3.0), epsilon = 1e-14);
        let g = th.grad(&t).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut a = t;
            let mut b = t;
            a[i] += h;
            b[i] -= h;
            let fd = (th.eval(&a).unwrap() - th.eval(&b).unwrap()) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-7 * g[i].abs());
        }
    }

    #[test]
    fn lq_rejects_small_q() {
        assert!(matches!(theta_lq(0.5, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn gradient_refused_on_boundary() {
        let th = theta_lq(2.0, 2).unwrap();
        assert!(matches!(th.grad(&[1.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn unit_scale_examples() {
        let s = unit_scale(&theta_lq(1.0, 2).unwrap()).unwrap();
        assert_eq!(s.scale().unwrap(), &[1.0, 1.0]);
        let s = unit_scale(&linear(&[2.0, 1.0])).unwrap();
        assert_eq!(s.scale().unwrap(), &[0.5, 1.0]);
        assert_relative_eq!(s.eval(&[0.3, 0.4]).unwrap(), 0.7, epsilon = 1e-15);
        let s = unit_scale(&theta_lq(2.0, 3).unwrap()).unwrap();
        assert_eq!(s.scale().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn unit_scale_is_idempotent() {
        let once = unit_scale(&linear(&[3.0, 0.7, 1.9])).unwrap();
        let twice = unit_scale(&once).unwrap();
        for (a, b) in once.scale().unwrap().iter().zip(twice.scale().unwrap()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-15);
        }
    }

    #[test]
    fn bar_augment_requires_scaling() {
        let th = theta_lq(2.0, 2).unwrap();
        assert!(matches!(bar_augment(&th), Err(Error::State(_))));
        let bar = bar_augment(&unit_scale(&th).unwrap()).unwrap();
        assert!(matches!(bar_augment(&bar), Err(Error::State(_))));
        assert!(matches!(unit_scale(&bar), Err(Error::State(_))));
    }

    #[test]
    fn bar_augment_sum_example() {
        let bar = bar_augment(&unit_scale(&theta_lq(1.0, 2).unwrap()).unwrap()).unwrap();
        assert_eq!(bar.eval(&[1.0, 1.0]).unwrap(), 3.0);
        assert_eq!(bar.grad(&[1.0, 1.0]).unwrap(), vec![1.5, 1.5]);
    }

    #[test]
    fn nested_gradient_matches_finite_differences() {
        let th = ThetaAggregator::new(ThetaForm::Nested {
            outer: Box::new(ThetaForm::Lq { q: 3.0, arity: 2 }),
            parts: vec![
                ThetaForm::Lq { q: 2.0, arity: 2 },
                ThetaForm::Linear { weights: vec![0.5] },
            ],
        })
        .unwrap();
        let t = [0.4, 1.1, 0.8];
        let g = th.grad(&t).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut a = t;
            let mut b = t;
            a[i] += h;
            b[i] -= h;
            let fd = (th.eval(&a).unwrap() - th.eval(&b).unwrap()) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-7, "{i}: {} vs {fd}", g[i]);
        }
        th.validate_by_sampling(200, 1).unwrap();
    }

    #[test]
    fn custom_theta_uses_finite_differences() {
        let th = ThetaAggregator::new(ThetaForm::Custom(CustomTheta {
            arity: 2,
            eval: Arc::new(|t: &[f64]| (t[0] * t[0] + 4.0 * t[1] * t[1]).sqrt()),
            grad: None,
            absolute_norm: true,
            label: "weighted l2".into(),
        }))
        .unwrap();
        assert_eq!(th.gradient_source(), GradientSource::FiniteDifference);
        let g = th.grad(&[3.0, 2.0]).unwrap();
        assert_relative_eq!(g[0], 0.6, epsilon = 1e-7);
        assert_relative_eq!(g[1], 1.6, epsilon = 1e-7);
        th.validate_by_sampling(100, 3).unwrap();
    }

    #[test]
    fn sampling_validation_catches_non_homogeneous_theta() {
        let th = ThetaAggregator::new(ThetaForm::Custom(CustomTheta {
            arity: 2,
            eval: Arc::new(|t: &[f64]| t[0] * t[0] + t[1]),
            grad: None,
            absolute_norm: false,
            label: "bad".into(),
        }))
        .unwrap();
        assert!(matches!(
            th.validate_by_sampling(50, 0),
            Err(Error::InvalidTheta(_))
        ));
    }
}
