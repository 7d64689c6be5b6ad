mod common;

use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use stablab_core::tensor::{
    fd_derivative_tensors, kron, kron_power, operator_norm, poly_derivative_tensors, sym_eigen,
    tensor_indices,
};

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

fn permutations(v: &[usize]) -> Vec<Vec<usize>> {
    if v.len() <= 1 {
        return vec![v.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..v.len() {
        let mut rest = v.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kron_mixed_product(seed in any::<u64>(), n in 2usize..=3) {
        let mut r = common::rng(seed);
        let a = common::uniform_matrix(n, n, &mut r);
        let b = common::uniform_matrix(n, n, &mut r);
        let c = common::uniform_matrix(n, n, &mut r);
        let d = common::uniform_matrix(n, n, &mut r);
        let lhs = kron(&a, &b).unwrap() * kron(&c, &d).unwrap();
        let rhs = kron(&(&a * &c), &(&b * &d)).unwrap();
        prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-12);
        let t = kron(&a, &b).unwrap().transpose();
        prop_assert_eq!(t, kron(&a.transpose(), &b.transpose()).unwrap());
    }

    #[test]
    fn kron_acts_on_vector_products(seed in any::<u64>(), n in 2usize..=3) {
        let mut r = common::rng(seed);
        let a = common::uniform_matrix(n, n, &mut r);
        let b = common::uniform_matrix(n, n, &mut r);
        let x = common::uniform_matrix(n, 1, &mut r);
        let y = common::uniform_matrix(n, 1, &mut r);
        let lhs = kron(&a, &b).unwrap() * kron(&x, &y).unwrap();
        let rhs = kron(&(&a * &x), &(&b * &y)).unwrap();
        prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-12);
    }

    #[test]
    fn kron_power_norm(v in prop::collection::vec(-2.0f64..2.0, 1..4), k in 1usize..=4) {
        let p = kron_power(&v, k).unwrap();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let pn = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((pn - n.powi(k as i32)).abs() <= 1e-12 * (1.0 + n.powi(k as i32)));
    }

    #[test]
    fn derivative_tensors_are_permutation_symmetric(seed in any::<u64>(), d in 1usize..=3) {
        let mut r = common::rng(seed);
        let f = common::random_poly(d, 0, 4, 2.0, &mut r);
        let x: Vec<f64> = (0..d).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        let t = poly_derivative_tensors(&f, &x).unwrap();
        for idx in tensor_indices(3, d) {
            for p in permutations(&idx) {
                prop_assert_eq!(t.d3.get(&idx), t.d3.get(&p));
            }
        }
        for idx in tensor_indices(4, d) {
            for p in permutations(&idx) {
                prop_assert_eq!(t.d4.get(&idx), t.d4.get(&p));
            }
        }
        let fd = fd_derivative_tensors(|y| f.value(y), &x, 4).unwrap();
        prop_assert!(fd.d3.asymmetry() <= 1e-6);
        prop_assert!(fd.d4.asymmetry() <= 1e-6);
    }

    #[test]
    fn finite_differences_match_exact(seed in any::<u64>(), d in 1usize..=3) {
        let mut r = common::rng(seed);
        let f = common::random_poly(d, 0, 4, 2.0, &mut r);
        let x: Vec<f64> = (0..d).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        let exact = poly_derivative_tensors(&f, &x).unwrap();
        let fd = fd_derivative_tensors(|y| f.value(y), &x, 4).unwrap();
        let close = |a: &[f64], b: &[f64]| {
            let scale = a.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            a.iter().zip(b).all(|(u, v)| (u - v).abs() <= 1e-4 * scale)
        };
        prop_assert!(close(&exact.grad, &fd.grad));
        prop_assert!(close(exact.hess.as_slice(), fd.hess.as_slice()));
        prop_assert!(close(exact.d3.data(), fd.d3.data()));
        prop_assert!(close(exact.d4.data(), fd.d4.data()));
    }

    #[test]
    fn eigen_reconstruction_and_orthogonality(seed in any::<u64>(), n in 1usize..=6) {
        let mut r = common::rng(seed);
        let m = common::uniform_matrix(n, n, &mut r);
        let a = (&m + m.transpose()) * 0.5;
        let e = sym_eigen(&a).unwrap();
        prop_assert!(max_abs_diff(&e.reconstruct(), &a) <= 1e-10);
        let gram = e.eigenvectors.transpose() * &e.eigenvectors;
        prop_assert!(max_abs_diff(&gram, &DMatrix::identity(n, n)) <= 1e-10);
        prop_assert!(e.eigenvalues.as_slice().windows(2).all(|w| w[0] <= w[1]));
        for i in 0..n {
            let col = e.eigenvectors.column(i);
            let big = col.iter().fold(0.0_f64, |m, v| if v.abs() > m.abs() { *v } else { m });
            prop_assert!(big > 0.0);
        }
    }

    #[test]
    fn operator_norm_matches_svd(seed in any::<u64>(), rows in 1usize..=6, cols in 1usize..=6) {
        let mut r = common::rng(seed);
        let a = common::uniform_matrix(rows, cols, &mut r);
        let oracle = a.clone().svd(false, false).singular_values.max();
        let n = operator_norm(&a).unwrap();
        prop_assert!((n - oracle).abs() <= 1e-8 * (1.0 + oracle));
    }
}

#[test]
fn operator_norm_examples() {
    let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -5.0]));
    assert_relative_eq!(operator_norm(&d).unwrap(), 5.0, max_relative = 1e-12);
    let u = DVector::from_vec(vec![1.0, 2.0, -2.0]);
    let v = DVector::from_vec(vec![3.0, 4.0]);
    let r1 = &u * v.transpose();
    assert_relative_eq!(operator_norm(&r1).unwrap(), 15.0, max_relative = 1e-12);
}

#[test]
fn kron_identity_examples() {
    let i2 = DMatrix::<f64>::identity(2, 2);
    assert_eq!(kron(&i2, &i2).unwrap(), DMatrix::identity(4, 4));
    let a = DMatrix::from_element(1, 1, 3.0);
    let b = DMatrix::from_element(1, 1, -2.0);
    assert_eq!(kron(&a, &b).unwrap()[(0, 0)], -6.0);
}
