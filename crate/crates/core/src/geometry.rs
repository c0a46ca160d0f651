//! Ellitopes and spectratopes as unit balls of norms.
//!
//! A basic ellitope is `{x : ∃t ∈ 𝒯, xᵀT_i x <= t_i}` with `𝒯 = {θ(t) <= 1}`;
//! its norm is `θ^{1/2}(‖T_1^{1/2}x‖², ..., ‖T_K^{1/2}x‖²)`. Spectratopes replace
//! `xᵀT_i x` by `S_i[x]²` with symmetric-matrix-valued linear maps. An optional
//! onto map `P` turns either set into its linear image, whose norm is the
//! corresponding factor norm.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::aggregation::aggregate_general;
use crate::catalog::{lp_certificate, smooth_surrogate_for_spectral, surrogate_exponent};
use crate::error::{Error, Result};
use crate::linalg;
use crate::norm::{approximation_certificate, pullback_certificate, NormFn, RegularityCertificate};
use crate::quotient::{quotient_certificate, QuotientMode, QuotientNorm};
use crate::theta::{ThetaAggregator, ThetaForm};

const PSD_RTOL: f64 = 1e-10;

/// Ellitope `P{x : ∃t ∈ 𝒯, xᵀT_i x <= t_i}`.
#[derive(Debug, Clone)]
pub struct Ellitope {
    n: usize,
    t_list: Vec<DMatrix<f64>>,
    roots: Vec<DMatrix<f64>>,
    theta: ThetaAggregator,
    p: Option<DMatrix<f64>>,
}

impl Ellitope {
    pub fn new(
        t_list: Vec<DMatrix<f64>>,
        theta: ThetaAggregator,
        p: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = t_list
            .first()
            .ok_or_else(|| Error::Data("an ellitope needs at least one matrix".into()))?
            .nrows();
        if theta.arity() != t_list.len() {
            return Err(Error::Data(format!(
                "aggregator of arity {} for {} matrices",
                theta.arity(),
                t_list.len()
            )));
        }
        let mut sum = DMatrix::zeros(n, n);
        let mut roots = Vec::with_capacity(t_list.len());
        for (i, t) in t_list.iter().enumerate() {
            if t.shape() != (n, n) {
                return Err(Error::Data(format!(
                    "T_{i} is {:?}, expected {n}x{n}",
                    t.shape()
                )));
            }
            if !linalg::is_symmetric(t, 1e-12) {
                return Err(Error::Data(format!("T_{i} is not symmetric")));
            }
            let (values, _) = linalg::sym_eigen(t)?;
            let scale = t.amax();
            if values[0] < -PSD_RTOL * scale {
                return Err(Error::Domain(format!(
                    "T_{i} has eigenvalue {} < 0",
                    values[0]
                )));
            }
            sum += t;
            roots.push(linalg::psd_sqrt(t)?);
        }
        let (values, _) = linalg::sym_eigen(&sum)?;
        if values[0] <= PSD_RTOL * values[n - 1].abs() {
            return Err(Error::Rank(
                "sum of the T_i is not positive definite".into(),
            ));
        }
        check_image(&p, n)?;
        Ok(Self {
            n,
            t_list,
            roots,
            theta,
            p,
        })
    }

    /// Ambient dimension of the underlying basic ellitope.
    pub fn ambient_dim(&self) -> usize {
        self.n
    }

    /// Dimension of the space the norm lives on.
    pub fn dim(&self) -> usize {
        self.p.as_ref().map_or(self.n, DMatrix::nrows)
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.t_list
    }

    pub fn theta(&self) -> &ThetaAggregator {
        &self.theta
    }

    pub fn image_map(&self) -> Option<&DMatrix<f64>> {
        self.p.as_ref()
    }

    /// Norm of the basic ellitope (the linear image is ignored).
    pub fn basic_norm(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n {
            return Err(Error::Data(format!(
                "expected length {}, got {}",
                self.n,
                x.len()
            )));
        }
        let t: Vec<f64> = self
            .roots
            .iter()
            .map(|r| {
                let y = linalg::mat_vec(r, x);
                linalg::dot(&y, &y)
            })
            .collect();
        Ok(self.theta.eval(&t)?.sqrt())
    }

    /// Norm evaluator; linear images go through the factor norm.
    pub fn norm_fn(&self) -> Result<NormFn> {
        let basic = Arc::new(self.clone());
        let f: NormFn = Arc::new(move |x: &[f64]| basic.basic_norm(x));
        self.wrap_image(f)
    }

    pub fn norm(&self, x: &[f64]) -> Result<f64> {
        (self.norm_fn()?)(x)
    }

    /// `x` lies in the set when its norm is at most `1 + tol`.
    pub fn contains(&self, x: &[f64], tol: f64) -> Result<bool> {
        Ok(self.norm(x)? <= 1.0 + tol)
    }

    fn wrap_image(&self, basic: NormFn) -> Result<NormFn> {
        match &self.p {
            None => Ok(basic),
            Some(p) => {
                let basic_cert = self.basic_certificate()?;
                image_norm(p, &basic_cert, basic)
            }
        }
    }

    fn stacked_roots(&self) -> DMatrix<f64> {
        let k = self.roots.len();
        let mut a = DMatrix::zeros(k * self.n, self.n);
        for (i, r) in self.roots.iter().enumerate() {
            a.view_mut((i * self.n, 0), (self.n, self.n)).copy_from(r);
        }
        a
    }

    fn basic_certificate(&self) -> Result<RegularityCertificate> {
        let k = self.roots.len();
        let children: Vec<RegularityCertificate> = (0..k)
            .map(|_| lp_certificate(2.0, self.n))
            .collect::<Result<_>>()?;
        let agg = aggregate_smooth_theta(&self.theta, &children)?;
        pullback_certificate(&agg, &self.stacked_roots())
    }

    /// Regular surrogate: general aggregation of `K` Euclidean norms, pulled
    /// back through `x ↦ [T_1^{1/2}x; ...; T_K^{1/2}x]`, then factored by `P`.
    pub fn regular_surrogate(&self) -> Result<RegularityCertificate> {
        let basic = self.basic_certificate()?;
        match &self.p {
            None => Ok(basic),
            Some(p) => quotient_certificate(&basic, p),
        }
    }

    /// The same set written as a spectratope: `S_i[x]` is the bordered matrix
    /// `[[0, (T_i^{1/2}x)ᵀ], [T_i^{1/2}x, 0]]`, whose spectral norm is
    /// `‖T_i^{1/2}x‖₂`.
    pub fn to_spectratope(&self) -> Result<Spectratope> {
        let n = self.n;
        let maps = self
            .roots
            .iter()
            .map(|r| {
                (0..n)
                    .map(|j| {
                        let mut s = DMatrix::zeros(n + 1, n + 1);
                        for i in 0..n {
                            s[(0, i + 1)] = r[(i, j)];
                            s[(i + 1, 0)] = r[(i, j)];
                        }
                        s
                    })
                    .collect()
            })
            .collect();
        Spectratope::new(n, maps, self.theta.clone(), self.p.clone())
    }

    /// Direct product `{(u, v) : u ∈ self, v ∈ other}` aggregated by `outer`
    /// over the two factors' aggregators.
    pub fn product(&self, other: &Ellitope, outer: ThetaForm) -> Result<Ellitope> {
        let (n1, n2) = (self.n, other.n);
        let embed = |t: &DMatrix<f64>, off: usize| {
            let mut m = DMatrix::zeros(n1 + n2, n1 + n2);
            m.view_mut((off, off), t.shape()).copy_from(t);
            m
        };
        let mut t_list: Vec<DMatrix<f64>> = self.t_list.iter().map(|t| embed(t, 0)).collect();
        t_list.extend(other.t_list.iter().map(|t| embed(t, n1)));
        let theta = product_theta(&self.theta, &other.theta, outer)?;
        let p = product_map(self.p.as_ref(), n1, other.p.as_ref(), n2);
        Ellitope::new(t_list, theta, p)
    }

    /// Linear image under an onto map acting on the current norm space.
    pub fn image(&self, map: &DMatrix<f64>) -> Result<Ellitope> {
        let p = compose_image(self.p.as_ref(), map, self.dim())?;
        Ellitope::new(self.t_list.clone(), self.theta.clone(), Some(p))
    }
}

/// Spectratope `P{x : ∃t ∈ 𝒯, S_i²[x] ⪯ t_i I}` with `S_i[x] = Σ_j x_j S^{ij}`.
#[derive(Debug, Clone)]
pub struct Spectratope {
    n: usize,
    maps: Vec<Vec<DMatrix<f64>>>,
    theta: ThetaAggregator,
    p: Option<DMatrix<f64>>,
}

impl Spectratope {
    pub fn new(
        n: usize,
        maps: Vec<Vec<DMatrix<f64>>>,
        theta: ThetaAggregator,
        p: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        if maps.is_empty() || n == 0 {
            return Err(Error::Data(
                "a spectratope needs at least one map on R^n, n >= 1".into(),
            ));
        }
        if theta.arity() != maps.len() {
            return Err(Error::Data(format!(
                "aggregator of arity {} for {} maps",
                theta.arity(),
                maps.len()
            )));
        }
        for (i, m) in maps.iter().enumerate() {
            if m.len() != n {
                return Err(Error::Data(format!(
                    "map {i} has {} matrices, expected {n}",
                    m.len()
                )));
            }
            let d = m[0].nrows();
            for (j, s) in m.iter().enumerate() {
                if s.shape() != (d, d) || d == 0 {
                    return Err(Error::Data(format!("S^({i},{j}) must be {d}x{d}")));
                }
                if !linalg::is_symmetric(s, 1e-12) {
                    return Err(Error::Data(format!("S^({i},{j}) is not symmetric")));
                }
            }
        }
        let out = Self { n, maps, theta, p };
        linalg::require_full_column_rank(&out.stacked_map(), "stacked spectratope map")?;
        check_image(&out.p, n)?;
        Ok(out)
    }

    pub fn ambient_dim(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.p.as_ref().map_or(self.n, DMatrix::nrows)
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.maps.iter().map(|m| m[0].nrows()).collect()
    }

    pub fn theta(&self) -> &ThetaAggregator {
        &self.theta
    }

    /// `S_i[x]`.
    pub fn apply(&self, i: usize, x: &[f64]) -> DMatrix<f64> {
        let d = self.maps[i][0].nrows();
        let mut s = DMatrix::zeros(d, d);
        for (xj, sj) in x.iter().zip(&self.maps[i]) {
            if *xj != 0.0 {
                s += sj * *xj;
            }
        }
        s
    }

    /// Rows stack the row-major entries of every `S_i[x]`.
    fn stacked_map(&self) -> DMatrix<f64> {
        let rows: usize = self.block_sizes().iter().map(|d| d * d).sum();
        let mut a = DMatrix::zeros(rows, self.n);
        let mut off = 0;
        for m in &self.maps {
            let d = m[0].nrows();
            for (j, s) in m.iter().enumerate() {
                for r in 0..d {
                    for c in 0..d {
                        a[(off + r * d + c, j)] = s[(r, c)];
                    }
                }
            }
            off += d * d;
        }
        a
    }

    pub fn basic_norm(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n {
            return Err(Error::Data(format!(
                "expected length {}, got {}",
                self.n,
                x.len()
            )));
        }
        let t = (0..self.maps.len())
            .map(|i| {
                let r = linalg::sym_spectral_norm(&self.apply(i, x))?;
                Ok(r * r)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(self.theta.eval(&t)?.sqrt())
    }

    pub fn norm_fn(&self) -> Result<NormFn> {
        let basic = Arc::new(self.clone());
        let f: NormFn = Arc::new(move |x: &[f64]| basic.basic_norm(x));
        match &self.p {
            None => Ok(f),
            Some(p) => image_norm(p, &self.basic_certificate()?, f),
        }
    }

    pub fn norm(&self, x: &[f64]) -> Result<f64> {
        (self.norm_fn()?)(x)
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> Result<bool> {
        Ok(self.norm(x)? <= 1.0 + tol)
    }

    fn basic_certificate(&self) -> Result<RegularityCertificate> {
        let children: Vec<RegularityCertificate> = self
            .block_sizes()
            .into_iter()
            .map(|d| smooth_surrogate_for_spectral(d, d).map(|(_, c)| c))
            .collect::<Result<_>>()?;
        let agg = aggregate_smooth_theta(&self.theta, &children)?;
        pullback_certificate(&agg, &self.stacked_map())
    }

    /// Regular surrogate: Schatten-q surrogates of the spectral norms,
    /// aggregated, pulled back through `x ↦ (S_1[x], ..., S_K[x])`, then
    /// factored by `P`.
    pub fn regular_surrogate(&self) -> Result<RegularityCertificate> {
        let basic = self.basic_certificate()?;
        match &self.p {
            None => Ok(basic),
            Some(p) => quotient_certificate(&basic, p),
        }
    }

    pub fn product(&self, other: &Spectratope, outer: ThetaForm) -> Result<Spectratope> {
        let (n1, n2) = (self.n, other.n);
        let mut maps = Vec::with_capacity(self.maps.len() + other.maps.len());
        for m in &self.maps {
            let d = m[0].nrows();
            let mut v = m.clone();
            v.extend(std::iter::repeat_n(DMatrix::zeros(d, d), n2));
            maps.push(v);
        }
        for m in &other.maps {
            let d = m[0].nrows();
            let mut v: Vec<DMatrix<f64>> = std::iter::repeat_n(DMatrix::zeros(d, d), n1).collect();
            v.extend(m.iter().cloned());
            maps.push(v);
        }
        let theta = product_theta(&self.theta, &other.theta, outer)?;
        let p = product_map(self.p.as_ref(), n1, other.p.as_ref(), n2);
        Spectratope::new(n1 + n2, maps, theta, p)
    }

    pub fn image(&self, map: &DMatrix<f64>) -> Result<Spectratope> {
        let p = compose_image(self.p.as_ref(), map, self.dim())?;
        Spectratope::new(self.n, self.maps.clone(), self.theta.clone(), Some(p))
    }
}

/// Aggregates with `θ`, replacing a top-level `max` by `ℓ_q`,
/// `q = max(2, ⌈ln(K+1)⌉ + 1)`, and folding the factor `K^{1/(2q)}` into `ς`.
fn aggregate_smooth_theta(
    theta: &ThetaAggregator,
    children: &[RegularityCertificate],
) -> Result<RegularityCertificate> {
    if let ThetaForm::Max { arity } = theta.form() {
        let k = *arity;
        let q = surrogate_exponent(k);
        let lq = ThetaAggregator::new(ThetaForm::Lq { q, arity: k })?;
        let (_, cert) = aggregate_general(&lq, children, None)?;
        let alpha = (k as f64).powf(1.0 / (2.0 * q));
        return approximation_certificate(
            &cert,
            alpha,
            &format!("max over {k} blocks replaced by l_{q}"),
        );
    }
    let (_, cert) = aggregate_general(theta, children, None)?;
    Ok(cert)
}

fn image_norm(
    p: &DMatrix<f64>,
    basic_cert: &RegularityCertificate,
    basic: NormFn,
) -> Result<NormFn> {
    let qn = Arc::new(QuotientNorm::new(
        p.clone(),
        basic_cert.surrogate().clone(),
        Some(basic),
    )?);
    Ok(Arc::new(move |u: &[f64]| {
        Ok(qn.eval(u, QuotientMode::Original)?.value)
    }))
}

fn check_image(p: &Option<DMatrix<f64>>, n: usize) -> Result<()> {
    if let Some(p) = p {
        if p.ncols() != n {
            return Err(Error::Data(format!(
                "image map has {} columns, ambient dimension is {n}",
                p.ncols()
            )));
        }
        linalg::require_full_row_rank(p, "image map")?;
    }
    Ok(())
}

fn product_theta(
    a: &ThetaAggregator,
    b: &ThetaAggregator,
    outer: ThetaForm,
) -> Result<ThetaAggregator> {
    if outer.arity() != 2 {
        return Err(Error::Data("product aggregator must have arity 2".into()));
    }
    if a.is_unit_scaled() || b.is_unit_scaled() {
        return Err(Error::State("product of preprocessed aggregators".into()));
    }
    ThetaAggregator::new(ThetaForm::Nested {
        outer: Box::new(outer),
        parts: vec![a.form().clone(), b.form().clone()],
    })
}

fn product_map(
    a: Option<&DMatrix<f64>>,
    n1: usize,
    b: Option<&DMatrix<f64>>,
    n2: usize,
) -> Option<DMatrix<f64>> {
    if a.is_none() && b.is_none() {
        return None;
    }
    let ia = DMatrix::identity(n1, n1);
    let ib = DMatrix::identity(n2, n2);
    let a = a.unwrap_or(&ia);
    let b = b.unwrap_or(&ib);
    let mut p = DMatrix::zeros(a.nrows() + b.nrows(), n1 + n2);
    p.view_mut((0, 0), a.shape()).copy_from(a);
    p.view_mut((a.nrows(), n1), b.shape()).copy_from(b);
    Some(p)
}

fn compose_image(
    current: Option<&DMatrix<f64>>,
    map: &DMatrix<f64>,
    dim: usize,
) -> Result<DMatrix<f64>> {
    if map.ncols() != dim {
        return Err(Error::Data(format!(
            "image map has {} columns, norm lives on dimension {dim}",
            map.ncols()
        )));
    }
    Ok(match current {
        Some(p) => map * p,
        None => map.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::lp_norm;
    use crate::theta::theta_lq;
    use approx::assert_relative_eq;

    fn axis_matrices(n: usize) -> Vec<DMatrix<f64>> {
        (0..n)
            .map(|i| {
                let mut m = DMatrix::zeros(n, n);
                m[(i, i)] = 1.0;
                m
            })
            .collect()
    }

    #[test]
    fn lp_ball_ellitope() {
        let e = Ellitope::new(axis_matrices(3), theta_lq(2.0, 3).unwrap(), None).unwrap();
        let x = [0.3, -1.2, 2.0];
        assert_relative_eq!(e.norm(&x).unwrap(), lp_norm(4.0, &x), max_relative = 1e-12);
    }

    #[test]
    fn euclidean_ball() {
        let e = Ellitope::new(
            vec![DMatrix::identity(2, 2)],
            theta_lq(1.0, 1).unwrap(),
            None,
        )
        .unwrap();
        assert_relative_eq!(e.norm(&[3.0, 4.0]).unwrap(), 5.0, max_relative = 1e-14);
        assert!(e.contains(&[0.0, 0.0], 0.0).unwrap());
        assert!(!e.contains(&[0.6 * 1.01, 0.8 * 1.01], 1e-6).unwrap());
    }

    #[test]
    fn rejects_bad_matrices() {
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(Ellitope::new(vec![neg], theta_lq(1.0, 1).unwrap(), None).is_err());
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            Ellitope::new(vec![singular], theta_lq(1.0, 1).unwrap(), None),
            Err(Error::Rank(_))
        ));
    }

    #[test]
    fn spectral_norm_spectratope() {
        // S[x] = x on symmetric 2x2 matrices parametrized by (a, b, c)
        let basis = vec![
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
        ];
        let s = Spectratope::new(3, vec![basis], theta_lq(1.0, 1).unwrap(), None).unwrap();
        // [[3, 0], [0, -5]]
        assert_relative_eq!(
            s.norm(&[3.0, 0.0, -5.0]).unwrap(),
            5.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn ellitope_as_spectratope() {
        let t1 = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let t2 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let e = Ellitope::new(vec![t1, t2], theta_lq(3.0, 2).unwrap(), None).unwrap();
        let s = e.to_spectratope().unwrap();
        let x = [0.7, -0.4];
        assert_relative_eq!(
            e.norm(&x).unwrap(),
            s.norm(&x).unwrap(),
            max_relative = 1e-10
        );
    }

    #[test]
    fn product_unfolds_definition() {
        let a = Ellitope::new(
            vec![DMatrix::identity(2, 2)],
            theta_lq(1.0, 1).unwrap(),
            None,
        )
        .unwrap();
        let b = Ellitope::new(
            vec![DMatrix::identity(3, 3)],
            theta_lq(1.0, 1).unwrap(),
            None,
        )
        .unwrap();
        let prod = a.product(&b, ThetaForm::Lq { q: 1.0, arity: 2 }).unwrap();
        let x = [1.0, 2.0, 0.5, -1.0, 3.0];
        let expected = (5.0_f64 + 10.25).sqrt();
        assert_relative_eq!(prod.norm(&x).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn max_theta_surrogate_has_folded_factor() {
        let t1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]);
        let t2 = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let th = ThetaAggregator::new(ThetaForm::Max { arity: 2 }).unwrap();
        let e = Ellitope::new(vec![t1, t2], th, None).unwrap();
        let cert = e.regular_surrogate().unwrap();
        assert!(cert.replays_exactly());
        assert!(cert.trace().iter().any(|s| s.contains("max over 2 blocks")));
    }
}
