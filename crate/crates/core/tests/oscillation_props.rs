mod common;

use proptest::prelude::*;
use stablab_core::dynamics::{run_gd_with, SimOptions, Termination};
use stablab_core::oscillation::{
    alternative_form, cycle_amplitude_estimate, hypothesized_sufficient_check, profile_minimum,
    q_vector, stable_oscillation_criterion, stable_oscillation_criterion_at, Verdict,
};

#[test]
fn both_forms_agree_on_500_instances() {
    let mut worst = 0.0_f64;
    for i in 0..500u64 {
        let d = 2 + (i % 3) as usize;
        let mut r = common::rng(1000 + i);
        let p = common::random_profile(d, &mut r);
        let rep = stable_oscillation_criterion(&p).unwrap();
        let alt = alternative_form(&p).unwrap();
        let rel = (rep.lhs - alt).abs() / rep.lhs.abs().max(alt.abs()).max(1e-300);
        worst = worst.max(rel);
        if hypothesized_sufficient_check(&p).unwrap() {
            assert_eq!(rep.verdict, Verdict::StableCycle, "instance {i}");
        }
    }
    assert!(worst <= 1e-10, "worst relative gap {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn verdict_ignores_eigenvector_scale_and_sign(seed in any::<u64>(), d in 2usize..=4, c in 0.1f64..10.0) {
        let mut r = common::rng(seed);
        let p = common::random_profile(d, &mut r);
        let base = stable_oscillation_criterion(&p).unwrap().verdict;
        let mut flipped = p.clone();
        flipped.v_max.iter_mut().for_each(|v| *v = -*v);
        prop_assert_eq!(stable_oscillation_criterion(&flipped).unwrap().verdict, base);
        let mut scaled = p.clone();
        let n = scaled.v_max.iter().map(|v| (c * v).powi(2)).sum::<f64>().sqrt();
        scaled.v_max.iter_mut().for_each(|v| *v = c * *v / n);
        prop_assert_eq!(stable_oscillation_criterion(&scaled).unwrap().verdict, base);
    }

    #[test]
    fn c0_sign_follows_lhs_minus_rhs(seed in any::<u64>(), d in 2usize..=4) {
        let mut r = common::rng(seed);
        let p = common::random_profile(d, &mut r);
        let rep = stable_oscillation_criterion(&p).unwrap();
        prop_assert_eq!(rep.c0.signum(), (rep.lhs - rep.rhs).signum());
        prop_assert!(rep.c0.abs() > 0.0 || rep.lhs == rep.rhs);
    }

    #[test]
    fn q_solves_the_hessian_system(seed in any::<u64>(), d in 2usize..=4) {
        let mut r = common::rng(seed);
        let p = common::random_profile(d, &mut r);
        let q = q_vector(&p).unwrap();
        let hq = &p.tensors.hess * nalgebra::DVector::from_vec(q);
        let w = p.tensors.d3.contract(&p.v_max, 2).unwrap();
        for (a, b) in hq.iter().zip(w.data()) {
            prop_assert!((a - 3.0 * b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}

/// Verdict vs GD just past the flip on clearly non-degenerate random quartics.
#[test]
fn verdict_predicts_simulation_on_random_quartics() {
    use rand::Rng;
    let mut checked = 0;
    let mut seed = 77u64;
    while checked < 6 {
        seed += 1;
        let mut r = common::rng(seed);
        let eigs = [1.0, r.random_range(0.1..0.8)];
        let h = common::spd_with_eigs(&eigs, &mut r);
        let loss = common::random_taylor_quartic(&h, &mut r);
        let p = profile_minimum(&loss, &[0.0, 0.0]).unwrap();
        let rep = stable_oscillation_criterion(&p).unwrap();
        if (rep.lhs - rep.rhs).abs() <= 0.5 {
            continue;
        }
        let eta = p.eta_lin * 1.001;
        let c0 = stable_oscillation_criterion_at(&p, eta).unwrap().c0;
        let amp = cycle_amplitude_estimate(p.eta_lin, eta, c0.abs()).unwrap();
        let x0: Vec<f64> = p.v_max.iter().map(|v| 1e-3 * v).collect();
        let opts = SimOptions {
            r_div: (3.0 * amp).max(0.25),
            ..SimOptions::default()
        };
        let traj = run_gd_with(&loss, &x0, eta, 60_000, &opts).unwrap();
        let bounded = traj.terminated == Termination::Cycle2;
        assert_eq!(bounded, rep.verdict == Verdict::StableCycle, "seed {seed}: {:?}", traj.terminated);
        checked += 1;
    }
}
