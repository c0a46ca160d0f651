use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

use regnorm::catalog::{lp_certificate, lp_norm};
use regnorm::norm::NormFn;
use regnorm::quotient::{quotient_certificate, QuotientMode, QuotientNorm};
use regnorm::Error;

fn p_matrix() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 4, &[1.0, 0.5, 0.0, -1.0, 0.0, 1.0, 2.0, 0.5])
}

fn lp_quotient(p: f64, pm: DMatrix<f64>) -> QuotientNorm {
    let n = pm.ncols();
    let cert = lp_certificate(p, n).unwrap();
    let exact: NormFn = Arc::new(move |x: &[f64]| Ok(lp_norm(p, x)));
    QuotientNorm::new(pm, cert.surrogate().clone(), Some(exact)).unwrap()
}

/// `(PPᵀ)⁻¹u`.
fn gram_solve(pm: &DMatrix<f64>, u: &[f64]) -> DVector<f64> {
    let g = pm * pm.transpose();
    g.lu().solve(&DVector::from_column_slice(u)).unwrap()
}

#[test]
fn euclidean_quotient_closed_forms() {
    let pm = p_matrix();
    let q = lp_quotient(2.0, pm.clone());
    for u in [[1.0, 2.0], [-0.5, 0.25], [3.0, -4.0]] {
        let w = gram_solve(&pm, &u);
        let value = DVector::from_column_slice(&u).dot(&w).sqrt();
        let argmin = pm.transpose() * &w;
        for mode in [QuotientMode::Surrogate, QuotientMode::Original] {
            let sol = q.eval(&u, mode).unwrap();
            assert_relative_eq!(sol.value, value, max_relative = 1e-8);
            for (a, b) in sol.argmin.iter().zip(argmin.iter()) {
                assert_relative_eq!(*a, *b, epsilon = 1e-8 * (1.0 + value));
            }
        }
        let g = q.grad(&u).unwrap();
        for (a, b) in g.iter().zip(w.iter()) {
            assert_relative_eq!(*a, 2.0 * b, max_relative = 1e-8, epsilon = 1e-10);
        }
    }
}

#[test]
fn coordinate_projection_keeps_head_and_zeros_tail() {
    let mut pm = DMatrix::zeros(2, 5);
    pm[(0, 0)] = 1.0;
    pm[(1, 1)] = 1.0;
    let q = lp_quotient(2.0, pm);
    let sol = q.eval(&[3.0, -4.0], QuotientMode::Surrogate).unwrap();
    assert_relative_eq!(sol.value, 5.0, max_relative = 1e-10);
    assert!(sol.argmin[2..].iter().all(|v| v.abs() < 1e-8));
    let g = q.grad(&[3.0, -4.0]).unwrap();
    assert_relative_eq!(g[0], 6.0, max_relative = 1e-8);
    assert_relative_eq!(g[1], -8.0, max_relative = 1e-8);
}

/// Grid search of `‖x₀ + Nz‖_4` over a two-dimensional fiber, refined around
/// the best cell.
fn grid_oracle(q: &QuotientNorm, u: &[f64]) -> f64 {
    let x0 = q.lift(u).unwrap();
    let null = q.nullspace_basis().clone();
    assert_eq!(null.ncols(), 2);
    let eval = |z0: f64, z1: f64| -> f64 {
        let x: Vec<f64> = (0..x0.len())
            .map(|i| x0[i] + null[(i, 0)] * z0 + null[(i, 1)] * z1)
            .collect();
        lp_norm(4.0, &x)
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
                    best = v;
                    b0 = z0;
                    b1 = z1;
                }
            }
        }
        c0 = b0;
        c1 = b1;
        radius *= 0.05;
    }
    best
}

#[test]
fn l4_quotient_matches_grid() {
    let pm = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -0.5]);
    let q = lp_quotient(4.0, pm);
    for u in [1.0, -2.5] {
        let oracle = grid_oracle(&q, &[u]);
        let sol = q.eval(&[u], QuotientMode::Original).unwrap();
        assert_relative_eq!(sol.value, oracle, max_relative = 1e-3);
        assert!(sol.value <= oracle * (1.0 + 1e-9));
    }
}

#[test]
fn l4_quotient_gradient_matches_finite_differences() {
    let pm = p_matrix();
    let q = lp_quotient(4.0, pm);
    let u = [0.7, -1.3];
    let g = q.grad(&u).unwrap();
    let psi = |v: &[f64]| q.eval(v, QuotientMode::Surrogate).unwrap().value.powi(2);
    let h = 1e-5;
    for i in 0..2 {
        let mut a = u;
        let mut b = u;
        a[i] += h;
        b[i] -= h;
        let fd = (psi(&a) - psi(&b)) / (2.0 * h);
        assert_relative_eq!(g[i], fd, max_relative = 1e-5);
    }
}

#[test]
fn rank_deficient_map_rejected() {
    let pm = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
    let cert = lp_certificate(2.0, 3).unwrap();
    assert!(matches!(
        quotient_certificate(&cert, &pm),
        Err(Error::Rank(_))
    ));
}

#[test]
fn certificate_keeps_constants() {
    let cert = lp_certificate(4.0, 4).unwrap();
    let qc = quotient_certificate(&cert, &p_matrix()).unwrap();
    assert_eq!((qc.kappa(), qc.sigma()), (3.0, 1.0));
    assert_eq!(qc.dim(), 2);
}

#[test]
fn zero_maps_to_zero() {
    let q = lp_quotient(4.0, p_matrix());
    let sol = q.eval(&[0.0, 0.0], QuotientMode::Original).unwrap();
    assert_eq!(sol.value, 0.0);
}
