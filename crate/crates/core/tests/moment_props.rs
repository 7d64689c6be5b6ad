mod common;

use proptest::prelude::*;
use stablab_core::moments::{
    assemble_block, assemble_truncation, batch_map_derivatives, compositions, max_linear_norm,
    block_norm_bound,
};
use stablab_core::sgd::{binomial, LossEnsemble};
use stablab_core::tensor::{asymmetry, operator_norm};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composition_count(p in 1usize..=12, k in 1usize..=12) {
        let c = compositions(p, k);
        let expected = if k <= p { binomial(p as u64 - 1, k as u64 - 1) } else { 0 };
        prop_assert_eq!(c.len() as u128, expected);
        prop_assert!(c.iter().all(|v| v.len() == k && v.iter().sum::<usize>() == p && v.iter().all(|x| *x >= 1)));
    }

    #[test]
    fn below_diagonal_blocks_are_rejected(seed in any::<u64>(), k in 2usize..=4) {
        let mut r = common::rng(seed);
        let e = common::random_ensemble(2, 2, 1, &mut r);
        let y = batch_map_derivatives(&e, 0.5).unwrap();
        prop_assert!(assemble_block(&y, k, k - 1).is_err());
    }

    #[test]
    fn diagonal_blocks_are_symmetric(seed in any::<u64>(), d in 1usize..=2, eta in 0.1f64..2.0) {
        let mut r = common::rng(seed);
        let e = common::random_ensemble(d, 3, 2, &mut r);
        let y = batch_map_derivatives(&e, eta).unwrap();
        for k in 1..=4 {
            prop_assert!(asymmetry(&assemble_block(&y, k, k).unwrap()) <= 1e-12);
        }
    }

    #[test]
    fn spectral_radius_respects_contraction(seed in any::<u64>(), d in 1usize..=2, frac in 0.05f64..0.99) {
        let mut r = common::rng(seed);
        let e = common::random_ensemble(d, 3, 1, &mut r);
        let lam = e.batch_hessians().iter()
            .map(|h| stablab_core::tensor::sym_eigen(h).unwrap().max_eigenvalue())
            .fold(0.0, f64::max);
        let y = batch_map_derivatives(&e, frac * 2.0 / lam).unwrap();
        let eps = 1.0 - max_linear_norm(&y).unwrap();
        prop_assert!(eps > 0.0);
        let t = assemble_truncation(&y, 4, 0.1).unwrap();
        prop_assert!(t.spectral_radius <= 1.0 - eps + 1e-12);
    }

    #[test]
    fn norm_bound_dominates_truncation_norm(seed in any::<u64>(), d in 1usize..=2, eta in 0.1f64..2.5, rho in 0.01f64..0.5) {
        let mut r = common::rng(seed);
        let e = common::random_ensemble(d, 2, 1, &mut r);
        let y = batch_map_derivatives(&e, eta).unwrap();
        let t = assemble_truncation(&y, 4, rho).unwrap();
        let measured = operator_norm(&t.to_matrix()).unwrap();
        prop_assert!(block_norm_bound(&t) >= measured * (1.0 - 1e-9));
    }

    #[test]
    fn unstable_batch_makes_diagonal_norms_grow(over in 0.001f64..0.4) {
        let e = LossEnsemble::prop1(0.5).unwrap();
        let y = batch_map_derivatives(&e, 2.0 + over).unwrap();
        let t = assemble_truncation(&y, 6, 0.1).unwrap();
        prop_assert!(t.diag_norms.windows(2).all(|w| w[1] > w[0]), "{:?}", t.diag_norms);
    }
}

#[test]
fn diagonal_norms_grow_eventually_for_random_unstable_ensembles() {
    for seed in 0..20u64 {
        let mut r = common::rng(seed);
        let e = common::random_ensemble(1, 3, 1, &mut r);
        let lam = e.batch_hessians().iter().map(|h| h[(0, 0)]).fold(0.0, f64::max);
        let y = batch_map_derivatives(&e, 2.2 / lam).unwrap();
        let t = assemble_truncation(&y, 16, 0.01).unwrap();
        let tail = &t.diag_norms[10..];
        assert!(tail.windows(2).all(|w| w[1] > w[0]), "seed {seed}: {tail:?}");
    }
}
