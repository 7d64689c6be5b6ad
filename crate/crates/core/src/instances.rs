//! Seeded random problem instances: rotations, SPD Hessians, symmetric
//! tensors, Taylor quartics and ensembles sharing a minimum at the origin.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::Result;
use crate::oscillation::{profile_from_tensors, MinimumProfile, ProfileOptions};
use crate::rng::StabRng;
use crate::sgd::LossEnsemble;
use crate::tensor::{DerivativeTensors, PolyLoss, SymTensor};

pub fn uniform_matrix(rows: usize, cols: usize, rng: &mut StabRng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Orthogonal factor of the QR decomposition of a uniform random matrix.
pub fn random_rotation(d: usize, rng: &mut StabRng) -> DMatrix<f64> {
    uniform_matrix(d, d, rng).qr().q()
}

/// `R diag(eigs) R^T` for a random rotation `R`, symmetrized.
pub fn spd_with_eigs(eigs: &[f64], rng: &mut StabRng) -> DMatrix<f64> {
    let r = random_rotation(eigs.len(), rng);
    let h = &r * DMatrix::from_diagonal(&DVector::from_column_slice(eigs)) * r.transpose();
    (&h + h.transpose()) * 0.5
}

/// Symmetrized tensor with raw entries drawn from `U[-1, 1]`.
pub fn random_sym_tensor(order: usize, d: usize, rng: &mut StabRng) -> Result<SymTensor> {
    let n = d.pow(order as u32);
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    SymTensor::symmetrized(order, d, data)
}

/// Profile of a random minimum: Hessian eigenvalues `1` and `U[0.1, 0.8]`,
/// random symmetric third and fourth derivatives.
pub fn random_profile(d: usize, rng: &mut StabRng) -> Result<MinimumProfile> {
    let mut eigs: Vec<f64> = (0..d - 1).map(|_| rng.random_range(0.1..0.8)).collect();
    eigs.push(1.0);
    let hess = spd_with_eigs(&eigs, rng);
    let tensors = DerivativeTensors {
        point: vec![0.0; d],
        grad: vec![0.0; d],
        hess,
        d3: random_sym_tensor(3, d, rng)?,
        d4: random_sym_tensor(4, d, rng)?,
        exact: true,
    };
    profile_from_tensors(tensors, ProfileOptions::default())
}

/// `x^T H x / 2 + T3[x]^3 / 6 + T4[x]^4 / 24` with random `T3`, `T4`.
pub fn random_taylor_quartic(hess: &DMatrix<f64>, rng: &mut StabRng) -> Result<PolyLoss> {
    let d = hess.nrows();
    let h = SymTensor::symmetrized(2, d, hess.transpose().as_slice().to_vec())?;
    let t3 = random_sym_tensor(3, d, rng)?;
    let t4 = random_sym_tensor(4, d, rng)?;
    PolyLoss::from_taylor(d, &[h, t3, t4])
}

/// Random 2-d quartic with `lambda = (1, U[0.1, 0.8])` at the origin.
pub fn random_quartic_2d(rng: &mut StabRng) -> Result<PolyLoss> {
    let eigs = [1.0, rng.random_range(0.1..0.8)];
    let h = spd_with_eigs(&eigs, rng);
    random_taylor_quartic(&h, rng)
}

/// Every monomial of total degree in `min_degree..=max_degree`, coefficients
/// in `[-c, c]`.
pub fn random_poly(
    d: usize,
    min_degree: u32,
    max_degree: u32,
    c: f64,
    rng: &mut StabRng,
) -> Result<PolyLoss> {
    let mut p = PolyLoss::zero(d);
    for e in monomials(d, max_degree) {
        if e.iter().sum::<u32>() >= min_degree {
            p.add_term(e, rng.random_range(-c..c))?;
        }
    }
    Ok(p)
}

fn monomials(d: usize, max_degree: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|e: Vec<u32>| {
                (0..=max_degree).map(move |k| {
                    let mut f = e.clone();
                    f.push(k);
                    f
                })
            })
            .filter(|e| e.iter().sum::<u32>() <= max_degree)
            .collect();
    }
    out
}

/// `n` random Taylor quartics with Hessian eigenvalues in `U[0.2, 1.5]`.
pub fn random_ensemble(d: usize, n: usize, batch: usize, rng: &mut StabRng) -> Result<LossEnsemble> {
    let losses = (0..n)
        .map(|_| {
            let eigs: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..1.5)).collect();
            let h = spd_with_eigs(&eigs, rng);
            random_taylor_quartic(&h, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    LossEnsemble::from_polys(losses, batch, vec![0.0; d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn rotation_is_orthogonal() {
        let r = random_rotation(3, &mut rng_from_seed(3));
        let g = r.transpose() * &r;
        assert!((g - DMatrix::identity(3, 3)).abs().max() < 1e-12);
    }

    #[test]
    fn quartic_has_requested_hessian() {
        let mut rng = rng_from_seed(9);
        let h = spd_with_eigs(&[1.0, 0.3], &mut rng);
        let p = random_taylor_quartic(&h, &mut rng).unwrap();
        let hp = p.derivative_tensor(&[0.0, 0.0], 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((hp.get(&[i, j]) - h[(i, j)]).abs() < 1e-14);
            }
        }
        assert!(p.gradient(&[0.0, 0.0]).iter().all(|g| *g == 0.0));
    }
}
