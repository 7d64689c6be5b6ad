mod common;

use proptest::prelude::*;
use stablab_core::dynamics::{exact_expectation, Statistic};
use stablab_core::sgd::{meansquare_statistics, sufficient_threshold, LossEnsemble};
use stablab_core::tensor::sym_eigen;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batch_curvature_lies_between_member_extremes(
        seed in any::<u64>(),
        d in 1usize..=3,
        n in 2usize..=4,
        b in 1usize..=4,
    ) {
        let mut r = common::rng(seed);
        let e = common::random_ensemble(d, n, b.min(n), &mut r);
        let member: Vec<_> = e.member_hessians().iter().map(|h| sym_eigen(h).unwrap()).collect();
        let lo = member.iter().map(|m| m.min_eigenvalue()).fold(f64::INFINITY, f64::min);
        let hi = member.iter().map(|m| m.max_eigenvalue()).fold(f64::NEG_INFINITY, f64::max);
        for h in e.batch_hessians() {
            let top = sym_eigen(h).unwrap().max_eigenvalue();
            prop_assert!(top >= lo - 1e-12 && top <= hi + 1e-12);
        }
    }

    #[test]
    fn sufficient_threshold_is_below_meansquare(
        h in prop::collection::vec(0.1f64..3.0, 2..6),
    ) {
        let spread = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - h.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let e = LossEnsemble::quadratic(&h, 1).unwrap();
        let rep = sufficient_threshold(&e).unwrap();
        let ms = meansquare_statistics(&e).unwrap();
        prop_assert!(rep.eta_sufficient < ms.eta_lin);
    }

    #[test]
    fn full_batch_thresholds_coincide(h in prop::collection::vec(0.1f64..3.0, 2..6)) {
        let e = LossEnsemble::quadratic(&h, h.len()).unwrap();
        let rep = sufficient_threshold(&e).unwrap();
        let mean = h.iter().sum::<f64>() / h.len() as f64;
        prop_assert!((rep.eta_sufficient - 2.0 / mean).abs() <= 1e-12 * (2.0 / mean));
        prop_assert_eq!(rep.eta_meansquare, Some(2.0 / mean));
    }
}

#[test]
fn prop1_expectation_brackets_two() {
    let e = LossEnsemble::prop1(0.5).unwrap();
    let below = exact_expectation(&e, &[0.2], 1.9, 20, Statistic::AbsDistance).unwrap();
    assert!(below.values.windows(2).all(|w| w[1] < w[0]));
    let above = exact_expectation(&e, &[0.2], 2.1, 20, Statistic::AbsDistance).unwrap();
    assert!(above.values[20] > above.values[19]);
    assert!(above.values[20] > above.values[0]);
}
