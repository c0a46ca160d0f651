use approx::assert_relative_eq;
use proptest::prelude::*;

use regnorm::theta::{bar_augment, theta_lq, unit_scale, ThetaAggregator, ThetaForm};
use regnorm::Error;

fn weighted(w: &[f64]) -> ThetaAggregator {
    ThetaAggregator::new(ThetaForm::Linear {
        weights: w.to_vec(),
    })
    .unwrap()
}

#[test]
fn euclidean_value_and_gradient() {
    let t = theta_lq(2.0, 2).unwrap();
    assert_relative_eq!(t.eval(&[3.0, 4.0]).unwrap(), 5.0);
    let g = t.grad(&[3.0, 4.0]).unwrap();
    assert_relative_eq!(g[0], 0.6, max_relative = 1e-14);
    assert_relative_eq!(g[1], 0.8, max_relative = 1e-14);
}

#[test]
fn unit_scaling_normalizes_axes() {
    let t = unit_scale(&weighted(&[2.0, 0.5, 4.0])).unwrap();
    for i in 0..3 {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        assert_relative_eq!(t.eval(&e).unwrap(), 1.0, max_relative = 1e-15);
    }
}

#[test]
fn preprocessing_order_is_enforced() {
    let t = theta_lq(2.0, 3).unwrap();
    assert!(matches!(bar_augment(&t), Err(Error::State(_))));
    let b = bar_augment(&unit_scale(&t).unwrap()).unwrap();
    assert!(matches!(unit_scale(&b), Err(Error::State(_))));
    assert!(matches!(bar_augment(&b), Err(Error::State(_))));
}

#[test]
fn nested_aggregator_evaluates_blockwise() {
    let t = ThetaAggregator::new(ThetaForm::Nested {
        outer: Box::new(ThetaForm::Lq { q: 1.0, arity: 2 }),
        parts: vec![
            ThetaForm::Lq { q: 2.0, arity: 2 },
            ThetaForm::Max { arity: 2 },
        ],
    })
    .unwrap();
    assert_relative_eq!(t.eval(&[3.0, 4.0, 1.0, 7.0]).unwrap(), 12.0);
}

#[test]
fn negative_input_rejected() {
    let t = theta_lq(2.0, 2).unwrap();
    assert!(t.eval(&[1.0, -1.0]).is_err());
}

fn lq_strategy() -> impl Strategy<Value = (f64, Vec<f64>)> {
    (1.0f64..6.0, prop::collection::vec(0.01f64..10.0, 1..6))
}

proptest! {
    #[test]
    fn homogeneous_of_degree_one((q, t) in lq_strategy(), lambda in 0.0f64..20.0) {
        let th = theta_lq(q, t.len()).unwrap();
        let scaled: Vec<f64> = t.iter().map(|v| lambda * v).collect();
        let a = th.eval(&scaled).unwrap();
        let b = lambda * th.eval(&t).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b));
    }

    #[test]
    fn monotone((q, t) in lq_strategy(), bump in 0.0f64..3.0, idx in 0usize..6) {
        let th = theta_lq(q, t.len()).unwrap();
        let mut s = t.clone();
        let i = idx % t.len();
        s[i] += bump;
        prop_assert!(th.eval(&s).unwrap() >= th.eval(&t).unwrap() * (1.0 - 1e-15));
    }

    #[test]
    fn euler_identity((q, t) in lq_strategy()) {
        let th = theta_lq(q, t.len()).unwrap();
        let g = th.grad(&t).unwrap();
        let dot: f64 = g.iter().zip(&t).map(|(a, b)| a * b).sum();
        let v = th.eval(&t).unwrap();
        prop_assert!((dot - v).abs() <= 1e-10 * (1.0 + v));
    }

    #[test]
    fn unit_scale_is_idempotent(w in prop::collection::vec(0.1f64..10.0, 1..6), t in prop::collection::vec(0.0f64..5.0, 6)) {
        let th = weighted(&w);
        let once = unit_scale(&th).unwrap();
        let twice = unit_scale(&once).unwrap();
        let t = &t[..w.len()];
        let (a, b) = (once.eval(t).unwrap(), twice.eval(t).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
    }

    #[test]
    fn bar_augmentation_within_factor_two((q, t) in lq_strategy()) {
        let u = unit_scale(&theta_lq(q, t.len()).unwrap()).unwrap();
        let b = bar_augment(&u).unwrap();
        let (tu, tb) = (u.eval(&t).unwrap(), b.eval(&t).unwrap());
        prop_assert!(tb >= tu * (1.0 - 1e-14));
        prop_assert!(tb <= 2.0 * tu * (1.0 + 1e-14));
    }

    #[test]
    fn weighted_sum_is_linear(w in prop::collection::vec(0.1f64..10.0, 3), t in prop::collection::vec(0.0f64..5.0, 3)) {
        let th = weighted(&w);
        let expected: f64 = w.iter().zip(&t).map(|(a, b)| a * b).sum();
        prop_assert!((th.eval(&t).unwrap() - expected).abs() <= 1e-12 * (1.0 + expected));
    }
}
