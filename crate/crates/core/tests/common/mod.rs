#![allow(dead_code)]

use nalgebra::DMatrix;
use stablab_core::instances;
use stablab_core::oscillation::MinimumProfile;
use stablab_core::rng::{rng_from_seed, StabRng};
use stablab_core::sgd::LossEnsemble;
use stablab_core::tensor::PolyLoss;

pub fn rng(seed: u64) -> StabRng {
    rng_from_seed(seed)
}

pub fn uniform_matrix(rows: usize, cols: usize, rng: &mut StabRng) -> DMatrix<f64> {
    instances::uniform_matrix(rows, cols, rng)
}

pub fn spd_with_eigs(eigs: &[f64], rng: &mut StabRng) -> DMatrix<f64> {
    instances::spd_with_eigs(eigs, rng)
}

pub fn random_profile(d: usize, rng: &mut StabRng) -> MinimumProfile {
    instances::random_profile(d, rng).unwrap()
}

pub fn random_poly(d: usize, min_degree: u32, max_degree: u32, c: f64, rng: &mut StabRng) -> PolyLoss {
    instances::random_poly(d, min_degree, max_degree, c, rng).unwrap()
}

pub fn random_taylor_quartic(hess: &DMatrix<f64>, rng: &mut StabRng) -> PolyLoss {
    instances::random_taylor_quartic(hess, rng).unwrap()
}

pub fn random_ensemble(d: usize, n: usize, batch: usize, rng: &mut StabRng) -> LossEnsemble {
    instances::random_ensemble(d, n, batch, rng).unwrap()
}
