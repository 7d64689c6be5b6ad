//! Truncated moment operator of SGD near an interpolating minimum.
//!
//! With `Dx = x - x*`, a batch step is `Dx' = sum_p Y_p Dx^{(x)p}` where
//! `Y_1 = I - eta H_B` and `Y_p = -(eta/p!) D^{p+1} L_B` (a `d x d^p`
//! matrix). The `k`-th Kronecker moment then evolves as
//!
//! ```text
//! E[Dx'^{(x)k}] = sum_{p>=k} Psi_{k,p} E[Dx^{(x)p}],
//! Psi_{k,p} = E[ sum_{k1+..+kk=p} Y_k1 (x) .. (x) Y_kk ]
//! ```
//!
//! and the scaled moments `E[Dx^{(x)k}]/rho^k` use blocks `rho^{p-k} Psi_{k,p}`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{exact_kron_moments, PATH_BUDGET};
use crate::error::{check_dim, Result, StabError};
use crate::sgd::{binomial, LossEnsemble};
use crate::tensor::{
    checked_power, kron_power, operator_norm, symmetric_spectral_radius, KRON_ENTRY_CAP,
};

/// Derivative order used when a loss has no exact polynomial form.
pub const FD_MAX_ORDER: usize = 3;
pub const DEFAULT_K: usize = 6;
pub const DEFAULT_RHO_CAP: f64 = 0.1;
/// Largest number of compositions enumerated for one block.
pub const COMPOSITION_CAP: u128 = 1_000_000;

/// Per-batch Taylor coefficients `Y_1..Y_P` of the batch map at `x*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMapDerivatives {
    pub eta: f64,
    pub dim: usize,
    pub max_order: usize,
    /// `per_batch[b][p - 1] = Y_p` for batch `b`.
    pub per_batch: Vec<Vec<DMatrix<f64>>>,
    /// False when derivatives come from finite differences.
    pub certified: bool,
}

impl BatchMapDerivatives {
    pub fn num_batches(&self) -> usize {
        self.per_batch.len()
    }

    /// `Y_p` of batch `b`, or `None` when `p > max_order` (a zero matrix).
    pub fn y(&self, b: usize, p: usize) -> Option<&DMatrix<f64>> {
        if p == 0 || p > self.max_order {
            None
        } else {
            Some(&self.per_batch[b][p - 1])
        }
    }
}

fn factorial(p: usize) -> f64 {
    (1..=p).map(|v| v as f64).product()
}

pub fn batch_map_derivatives(ensemble: &LossEnsemble, eta: f64) -> Result<BatchMapDerivatives> {
    let d = ensemble.dim();
    let x_star = ensemble.x_star();
    let degrees: Option<Vec<usize>> = (0..ensemble.num_batches())
        .map(|b| ensemble.batch_loss(b).exact_degree())
        .collect();
    let (max_order, certified) = match &degrees {
        Some(g) => (g.iter().copied().max().unwrap_or(0).saturating_sub(1).max(1), true),
        None => (FD_MAX_ORDER, false),
    };
    let mut per_batch = Vec::with_capacity(ensemble.num_batches());
    for b in 0..ensemble.num_batches() {
        let h = &ensemble.batch_hessians()[b];
        let mut ys = vec![DMatrix::identity(d, d) - h * eta];
        for p in 2..=max_order {
            let cols = checked_power(d, p, KRON_ENTRY_CAP)?;
            let t = ensemble.batch_loss(b).derivative_tensor(x_star, p + 1)?;
            let scale = -eta / factorial(p);
            let y = DMatrix::from_row_slice(d, cols, t.data()) * scale;
            ys.push(y);
        }
        per_batch.push(ys);
    }
    Ok(BatchMapDerivatives {
        eta,
        dim: d,
        max_order,
        per_batch,
        certified,
    })
}

/// All compositions of `p` into `k` positive parts, lexicographic.
pub fn compositions(p: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(rest: usize, parts: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            cur.push(rest);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for first in 1..=rest.saturating_sub(parts - 1) {
            cur.push(first);
            rec(rest - first, parts - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k == 0 || p < k {
        return out;
    }
    rec(p, k, &mut Vec::with_capacity(k), &mut out);
    out
}

/// Unscaled block `Psi_{k,p}`, shape `d^k x d^p`.
pub fn assemble_block(derivs: &BatchMapDerivatives, k: usize, p: usize) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Err(StabError::InvalidArgument("moment order k must be positive".into()));
    }
    if p < k {
        return Err(StabError::InvalidArgument(format!(
            "block ({k}, {p}) lies below the diagonal; blocks need p >= k"
        )));
    }
    let d = derivs.dim;
    let rows = checked_power(d, k, KRON_ENTRY_CAP)?;
    let cols = checked_power(d, p, KRON_ENTRY_CAP)?;
    let entries = rows as u128 * cols as u128;
    if entries > KRON_ENTRY_CAP {
        return Err(StabError::SizeCap {
            requested: entries,
            cap: KRON_ENTRY_CAP,
        });
    }
    let expected = binomial(p as u64 - 1, k as u64 - 1);
    if expected > COMPOSITION_CAP {
        return Err(StabError::SizeCap {
            requested: expected,
            cap: COMPOSITION_CAP,
        });
    }
    let comps = compositions(p, k);
    if comps.len() as u128 != expected {
        return Err(StabError::InvalidArgument(format!(
            "composition enumeration produced {} terms, expected {expected}",
            comps.len()
        )));
    }
    let mut total = DMatrix::zeros(rows, cols);
    for b in 0..derivs.num_batches() {
        for comp in &comps {
            let mut factors = comp.iter().map(|&kappa| derivs.y(b, kappa));
            let first = match factors.next().flatten() {
                Some(m) => m.clone(),
                None => continue,
            };
            let mut acc = Some(first);
            for f in factors {
                acc = match (acc, f) {
                    (Some(a), Some(m)) => Some(a.kronecker(m)),
                    _ => None,
                };
            }
            if let Some(a) = acc {
                total += a;
            }
        }
    }
    Ok(total / derivs.num_batches() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub k: usize,
    pub p: usize,
    /// `rho^{p-k} Psi_{k,p}`.
    pub matrix: DMatrix<f64>,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentOperatorTruncation {
    pub k_max: usize,
    pub rho: f64,
    pub dim: usize,
    /// Blocks with `1 <= k <= p <= k_max`, ordered by `(k, p)`.
    pub blocks: Vec<Block>,
    /// `row_sums[k-1] = sum_p |block(k, p)|`.
    pub row_sums: Vec<f64>,
    /// `col_sums[p-1] = sum_k |block(k, p)|`.
    pub col_sums: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub diag_norms: Vec<f64>,
    pub diag_radii: Vec<f64>,
    pub spectral_radius: f64,
    /// `max_B |Y_1|`; the truncation is certifiable only when this is < 1.
    pub max_linear_norm: f64,
    pub certifiable: bool,
}

/// Norms and spectral data without the block matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationSummary {
    pub k_max: usize,
    pub rho: f64,
    pub dim: usize,
    pub block_norms: Vec<(usize, usize, f64)>,
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub norm_bound: f64,
    pub diag_norms: Vec<f64>,
    pub diag_radii: Vec<f64>,
    pub spectral_radius: f64,
    pub max_linear_norm: f64,
    pub certifiable: bool,
}

impl MomentOperatorTruncation {
    pub fn block(&self, k: usize, p: usize) -> Option<&Block> {
        self.blocks.iter().find(|b| b.k == k && b.p == p)
    }

    pub fn summary(&self) -> TruncationSummary {
        TruncationSummary {
            k_max: self.k_max,
            rho: self.rho,
            dim: self.dim,
            block_norms: self.blocks.iter().map(|b| (b.k, b.p, b.norm)).collect(),
            row_sums: self.row_sums.clone(),
            col_sums: self.col_sums.clone(),
            alpha: self.alpha,
            beta: self.beta,
            norm_bound: block_norm_bound(self),
            diag_norms: self.diag_norms.clone(),
            diag_radii: self.diag_radii.clone(),
            spectral_radius: self.spectral_radius,
            max_linear_norm: self.max_linear_norm,
            certifiable: self.certifiable,
        }
    }

    /// The full block upper-triangular matrix on `R^{d} x .. x R^{d^K}`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let sizes: Vec<usize> = (1..=self.k_max).map(|k| self.dim.pow(k as u32)).collect();
        let offsets: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        let n: usize = sizes.iter().sum();
        let mut m = DMatrix::zeros(n, n);
        for b in &self.blocks {
            m.view_mut(
                (offsets[b.k - 1], offsets[b.p - 1]),
                (sizes[b.k - 1], sizes[b.p - 1]),
            )
            .copy_from(&b.matrix);
        }
        m
    }
}

fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    match symmetric_spectral_radius(m) {
        Err(StabError::NotSymmetric { .. }) => Ok(m
            .complex_eigenvalues()
            .iter()
            .fold(0.0_f64, |r, z| r.max(z.norm()))),
        other => other,
    }
}

pub fn assemble_truncation(
    derivs: &BatchMapDerivatives,
    k_max: usize,
    rho: f64,
) -> Result<MomentOperatorTruncation> {
    if k_max == 0 {
        return Err(StabError::InvalidArgument("K must be positive".into()));
    }
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(StabError::InvalidArgument(format!(
            "rho must be positive and finite, got {rho}"
        )));
    }
    let pairs: Vec<(usize, usize)> = (1..=k_max)
        .flat_map(|k| (k..=k_max).map(move |p| (k, p)))
        .collect();
    let blocks = pairs
        .par_iter()
        .map(|&(k, p)| {
            let matrix = assemble_block(derivs, k, p)? * rho.powi((p - k) as i32);
            let norm = operator_norm(&matrix)?;
            Ok(Block { k, p, matrix, norm })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut row_sums = vec![0.0; k_max];
    let mut col_sums = vec![0.0; k_max];
    for b in &blocks {
        row_sums[b.k - 1] += b.norm;
        col_sums[b.p - 1] += b.norm;
    }
    let alpha = col_sums.iter().copied().fold(0.0, f64::max);
    let beta = row_sums.iter().copied().fold(0.0, f64::max);
    let diag: Vec<&Block> = blocks.iter().filter(|b| b.k == b.p).collect();
    let diag_norms = diag.iter().map(|b| b.norm).collect();
    let diag_radii = diag
        .par_iter()
        .map(|b| spectral_radius(&b.matrix))
        .collect::<Result<Vec<f64>>>()?;
    let spectral_radius = diag_radii.iter().copied().fold(0.0, f64::max);
    let max_linear_norm = (0..derivs.num_batches())
        .map(|b| operator_norm(derivs.y(b, 1).expect("Y_1 always present")))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(MomentOperatorTruncation {
        k_max,
        rho,
        dim: derivs.dim,
        blocks,
        row_sums,
        col_sums,
        alpha,
        beta,
        diag_norms,
        diag_radii,
        spectral_radius,
        certifiable: max_linear_norm < 1.0,
        max_linear_norm,
    })
}

/// Block Schur bound `sqrt(alpha * beta)` on the operator norm.
pub fn block_norm_bound(trunc: &MomentOperatorTruncation) -> f64 {
    (trunc.alpha * trunc.beta).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoCertificate {
    pub c: f64,
    pub epsilon: f64,
    pub rho_star: f64,
    /// Radius at which `gamma` is evaluated.
    pub rho: f64,
    pub gamma: f64,
    pub certified: bool,
}

/// `max_B |Y_1|`.
pub fn max_linear_norm(derivs: &BatchMapDerivatives) -> Result<f64> {
    let mut worst = 0.0_f64;
    for b in 0..derivs.num_batches() {
        worst = worst.max(operator_norm(derivs.y(b, 1).expect("Y_1 always present"))?);
    }
    Ok(worst)
}

/// Radius certificate at the default `rho = min(rho*/2, 0.1)`.
pub fn rho_certificate(derivs: &BatchMapDerivatives) -> Result<RhoCertificate> {
    rho_certificate_at(derivs, None)
}

pub fn rho_certificate_at(derivs: &BatchMapDerivatives, rho: Option<f64>) -> Result<RhoCertificate> {
    let epsilon = 1.0 - max_linear_norm(derivs)?;
    if !(epsilon > 0.0) {
        return Err(StabError::EpsilonNonPositive { epsilon });
    }
    let mut c = 0.0_f64;
    for ys in &derivs.per_batch {
        for (i, y) in ys.iter().enumerate() {
            let m = y.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if m > 0.0 {
                c = c.max(m.powf(1.0 / (i as f64 + 2.0)));
            }
        }
    }
    let sd = (derivs.dim as f64).sqrt();
    let c3d = c.powi(3) * sd.powi(3);
    let rho_star = if c == 0.0 {
        f64::INFINITY
    } else {
        epsilon / (c3d + epsilon * c * sd)
    };
    let rho = rho.unwrap_or_else(|| (rho_star / 2.0).min(DEFAULT_RHO_CAP));
    let q = c * sd * rho;
    let gamma = if q < 1.0 {
        1.0 - epsilon + c3d * rho / (1.0 - q)
    } else {
        f64::INFINITY
    };
    Ok(RhoCertificate {
        c,
        epsilon,
        rho_star,
        rho,
        gamma,
        certified: derivs.certified,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentDecayRow {
    pub t: usize,
    pub k: usize,
    /// Exact normalized moment `E[Dx_t^{(x)k}] / rho^k`.
    pub exact: Vec<f64>,
    pub predicted: Vec<f64>,
    /// Largest absolute component difference.
    pub abs_error: f64,
    /// `rho^{K+1-k}`.
    pub truncation_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentDecayTable {
    pub k_max: usize,
    pub rho: f64,
    pub rows: Vec<MomentDecayRow>,
    /// `max_error[k-1]` over all `t`.
    pub max_error: Vec<f64>,
    pub saturated: bool,
}

/// Compares exact normalized moments with `mu_{t+1} = Psi_rho^{(K)} mu_t`.
pub fn moment_decay_check(
    ensemble: &LossEnsemble,
    eta: f64,
    x0: &[f64],
    k_max: usize,
    rho: f64,
    t_max: usize,
) -> Result<MomentDecayTable> {
    check_dim(ensemble.dim(), x0.len())?;
    let delta: Vec<f64> = x0.iter().zip(ensemble.x_star()).map(|(a, b)| a - b).collect();
    let r0 = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(r0 < rho) {
        return Err(StabError::InvalidArgument(format!(
            "|x0 - x*| = {r0} must be below rho = {rho}"
        )));
    }
    let derivs = batch_map_derivatives(ensemble, eta)?;
    let trunc = assemble_truncation(&derivs, k_max, rho)?;
    let exact = exact_kron_moments(ensemble, x0, eta, t_max, k_max, PATH_BUDGET)?;

    let scaled: Vec<f64> = delta.iter().map(|v| v / rho).collect();
    let mut mu: Vec<DVector<f64>> = (1..=k_max)
        .map(|k| kron_power(&scaled, k).map(DVector::from_vec))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity((t_max + 1) * k_max);
    let mut max_error = vec![0.0_f64; k_max];
    for t in 0..=t_max {
        if t > 0 {
            mu = (1..=k_max)
                .map(|k| {
                    let mut acc = DVector::zeros(mu[k - 1].len());
                    for p in k..=k_max {
                        let b = trunc.block(k, p).expect("block assembled");
                        acc += &b.matrix * &mu[p - 1];
                    }
                    acc
                })
                .collect();
        }
        for k in 1..=k_max {
            let scale = rho.powi(k as i32);
            let ex: Vec<f64> = exact.moments[t][k - 1].iter().map(|v| v / scale).collect();
            let pr: Vec<f64> = mu[k - 1].iter().copied().collect();
            let abs_error = ex
                .iter()
                .zip(&pr)
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            max_error[k - 1] = max_error[k - 1].max(abs_error);
            rows.push(MomentDecayRow {
                t,
                k,
                exact: ex,
                predicted: pr,
                abs_error,
                truncation_scale: rho.powi((k_max + 1 - k) as i32),
            });
        }
    }
    Ok(MomentDecayTable {
        k_max,
        rho,
        rows,
        max_error,
        saturated: exact.saturated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::PolyLoss;

    fn scalar(m: &DMatrix<f64>) -> f64 {
        assert_eq!(m.shape(), (1, 1));
        m[(0, 0)]
    }

    #[test]
    fn f_plus_map_coefficients() {
        let e = LossEnsemble::from_polys(vec![PolyLoss::f_plus()], 1, vec![0.0]).unwrap();
        let y = batch_map_derivatives(&e, 2.0).unwrap();
        assert_eq!(y.max_order, 3);
        assert_eq!(scalar(y.y(0, 1).unwrap()), -1.0);
        assert_eq!(scalar(y.y(0, 2).unwrap()), 0.0);
        assert_eq!(scalar(y.y(0, 3).unwrap()), -2.0);
        assert_eq!(scalar(&assemble_block(&y, 1, 3).unwrap()), -2.0);
        assert_eq!(scalar(&assemble_block(&y, 2, 3).unwrap()), 0.0);
    }

    #[test]
    fn quadratic_batch_has_only_linear_term() {
        let e = LossEnsemble::quadratic(&[1.0, 0.5], 1).unwrap();
        let y = batch_map_derivatives(&e, 1.0).unwrap();
        assert_eq!(y.max_order, 1);
        assert_eq!(scalar(y.y(1, 1).unwrap()), 0.5);
        let t = assemble_truncation(&y, 4, 0.1).unwrap();
        for b in &t.blocks {
            if b.k != b.p {
                assert_eq!(b.norm, 0.0);
            }
        }
    }

    #[test]
    fn prop1_blocks() {
        let e = LossEnsemble::prop1(0.5).unwrap();
        let y = batch_map_derivatives(&e, 1.0).unwrap();
        assert_eq!(scalar(y.y(1, 1).unwrap()), 0.5);
        assert_eq!(scalar(&assemble_block(&y, 1, 1).unwrap()), 0.25);
        let t = assemble_truncation(&y, 3, 0.1).unwrap();
        for k in 1..=3 {
            let expect = 0.5 * 0.5f64.powi(k as i32);
            assert!((scalar(&t.block(k, k).unwrap().matrix) - expect).abs() < 1e-15);
        }
        assert!((t.spectral_radius - 0.25).abs() < 1e-12);
    }

    #[test]
    fn composition_counts() {
        assert_eq!(compositions(3, 2), vec![vec![1, 2], vec![2, 1]]);
        for p in 1..=8 {
            for k in 1..=p {
                assert_eq!(
                    compositions(p, k).len() as u128,
                    binomial(p as u64 - 1, k as u64 - 1)
                );
            }
        }
        assert!(compositions(2, 3).is_empty());
    }

    #[test]
    fn lower_blocks_are_rejected() {
        let e = LossEnsemble::prop1(0.5).unwrap();
        let y = batch_map_derivatives(&e, 1.0).unwrap();
        assert!(assemble_block(&y, 3, 2).is_err());
    }

    #[test]
    fn prop1_certificate() {
        let e = LossEnsemble::prop1(0.5).unwrap();
        let y = batch_map_derivatives(&e, 1.0).unwrap();
        let c = rho_certificate(&y).unwrap();
        assert_eq!(c.epsilon, 0.5);
        assert_eq!(c.c, 1.0);
        assert!((c.rho_star - 1.0 / 3.0).abs() < 1e-15);
        assert!(c.certified);
        let c = rho_certificate_at(&y, Some(0.1)).unwrap();
        assert!((c.gamma - (0.5 + 0.1 / 0.9)).abs() < 1e-14);
    }

    #[test]
    fn boundary_ensemble_has_no_certificate() {
        let e = LossEnsemble::prop1(0.5).unwrap();
        let y = batch_map_derivatives(&e, 2.0).unwrap();
        assert!(matches!(
            rho_certificate(&y),
            Err(StabError::EpsilonNonPositive { .. })
        ));
    }

    #[test]
    fn quadratic_moments_match_exactly() {
        let e = LossEnsemble::quadratic(&[1.0, 0.5, 1.5], 2).unwrap();
        let table = moment_decay_check(&e, 0.8, &[0.05], 4, 0.1, 6).unwrap();
        assert!(table.max_error.iter().all(|err| *err < 1e-12));
    }

    #[test]
    fn single_block_bound_is_its_norm() {
        let e = LossEnsemble::prop1(0.5).unwrap();
        let y = batch_map_derivatives(&e, 1.0).unwrap();
        let t = assemble_truncation(&y, 1, 0.1).unwrap();
        assert_eq!(block_norm_bound(&t), t.blocks[0].norm);
    }
}
