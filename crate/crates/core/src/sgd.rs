//! Loss ensembles, batches and SGD step-size thresholds.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

use crate::dynamics::{superlinear_divergence_test, GrowthVerdict};
use crate::error::{check_dim, Result, StabError};
use crate::tensor::{
    fd_derivative_tensors, sym_eigen_capped, DerivativeTensors, Objective, PolyLoss, SymTensor,
};

/// Cap on the number of enumerated batches.
pub const BATCH_ENUMERATION_CAP: u128 = 1_000_000;
/// Gradient tolerance for the interpolation check.
pub const INTERPOLATION_GRAD_TOL: f64 = 1e-8;

/// Average of several objectives, used for batch losses that are not all
/// polynomial.
#[derive(Clone)]
pub struct MeanObjective {
    members: Vec<Arc<dyn Objective>>,
}

impl MeanObjective {
    pub fn new(members: Vec<Arc<dyn Objective>>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| StabError::InvalidArgument("mean of no objectives".into()))?;
        let d = first.dim();
        for m in &members {
            check_dim(d, m.dim())?;
        }
        Ok(Self { members })
    }

    fn weight(&self) -> f64 {
        1.0 / self.members.len() as f64
    }
}

impl fmt::Debug for MeanObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeanObjective")
            .field("members", &self.members.len())
            .finish()
    }
}

impl Objective for MeanObjective {
    fn dim(&self) -> usize {
        self.members[0].dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.members.iter().map(|m| m.value(x)).sum::<f64>() * self.weight()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for m in &self.members {
            for (gi, mi) in g.iter_mut().zip(m.gradient(x)) {
                *gi += mi;
            }
        }
        let w = self.weight();
        g.iter_mut().for_each(|v| *v *= w);
        g
    }

    fn derivative_tensors(&self, x: &[f64]) -> Result<DerivativeTensors> {
        if self.members.iter().all(|m| m.exact_degree().is_some()) {
            let d = self.dim();
            let h = self.derivative_tensor(x, 2)?;
            Ok(DerivativeTensors {
                point: x.to_vec(),
                grad: self.gradient(x),
                hess: DMatrix::from_row_slice(d, d, h.data()),
                d3: self.derivative_tensor(x, 3)?,
                d4: self.derivative_tensor(x, 4)?,
                exact: true,
            })
        } else {
            fd_derivative_tensors(|p: &[f64]| self.value(p), x, 4)
        }
    }

    fn derivative_tensor(&self, x: &[f64], order: usize) -> Result<SymTensor> {
        let mut acc: Option<Vec<f64>> = None;
        for m in &self.members {
            let t = m.derivative_tensor(x, order)?;
            match acc.as_mut() {
                None => acc = Some(t.data().to_vec()),
                Some(a) => a.iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
            }
        }
        let w = self.weight();
        let data = acc.unwrap().into_iter().map(|v| v * w).collect();
        SymTensor::from_symmetric_data(order, self.dim(), data)
    }

    fn exact_degree(&self) -> Option<usize> {
        self.members
            .iter()
            .map(|m| m.exact_degree())
            .try_fold(0, |acc, d| d.map(|d| acc.max(d)))
    }
}

/// Sample losses `f_1..f_n` with batch size `B` and a candidate minimizer.
#[derive(Clone)]
pub struct LossEnsemble {
    losses: Vec<Arc<dyn Objective>>,
    batch_size: usize,
    x_star: Vec<f64>,
    batches: Vec<Vec<usize>>,
    batch_losses: Vec<Arc<dyn Objective>>,
    batch_hessians: Vec<DMatrix<f64>>,
    member_hessians: Vec<DMatrix<f64>>,
    mean_loss: Arc<dyn Objective>,
}

impl fmt::Debug for LossEnsemble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LossEnsemble")
            .field("n", &self.losses.len())
            .field("batch_size", &self.batch_size)
            .field("x_star", &self.x_star)
            .field("batches", &self.batches)
            .finish()
    }
}

/// `C(n, k)` in `u128`, saturating.
pub fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i + 1) as u128;
    }
    acc
}

/// All size-`k` subsets of `0..n` in lexicographic order.
pub fn enumerate_batches(n: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(StabError::InvalidArgument(format!(
            "batch size must satisfy 1 <= B <= n, got B = {k}, n = {n}"
        )));
    }
    let count = binomial(n as u64, k as u64);
    if count > BATCH_ENUMERATION_CAP {
        return Err(StabError::SizeCap {
            requested: count,
            cap: BATCH_ENUMERATION_CAP,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    Ok(out)
}

fn mean_objective(members: Vec<Arc<dyn Objective>>) -> Result<Arc<dyn Objective>> {
    let polys: Option<Vec<&PolyLoss>> = members.iter().map(|m| m.as_poly()).collect();
    match polys {
        Some(p) => Ok(Arc::new(PolyLoss::mean(p)?)),
        None => Ok(Arc::new(MeanObjective::new(members)?)),
    }
}

fn hessian_at(loss: &dyn Objective, x: &[f64]) -> Result<DMatrix<f64>> {
    let d = loss.dim();
    let h = loss.derivative_tensor(x, 2)?;
    Ok(DMatrix::from_row_slice(d, d, h.data()))
}

impl LossEnsemble {
    pub fn new(
        losses: Vec<Arc<dyn Objective>>,
        batch_size: usize,
        x_star: Vec<f64>,
    ) -> Result<Self> {
        let first = losses
            .first()
            .ok_or_else(|| StabError::InvalidArgument("ensemble needs at least one loss".into()))?;
        let d = first.dim();
        check_dim(d, x_star.len())?;
        for l in &losses {
            check_dim(d, l.dim())?;
        }
        let batches = enumerate_batches(losses.len(), batch_size)?;
        let member_hessians = losses
            .iter()
            .map(|l| hessian_at(l.as_ref(), &x_star))
            .collect::<Result<Vec<_>>>()?;
        let mut batch_losses = Vec::with_capacity(batches.len());
        let mut batch_hessians = Vec::with_capacity(batches.len());
        for b in &batches {
            batch_losses.push(mean_objective(
                b.iter().map(|&i| Arc::clone(&losses[i])).collect(),
            )?);
            let mut h = DMatrix::zeros(d, d);
            for &i in b {
                h += &member_hessians[i];
            }
            batch_hessians.push(h / batch_size as f64);
        }
        let mean_loss = mean_objective(losses.clone())?;
        Ok(Self {
            losses,
            batch_size,
            x_star,
            batches,
            batch_losses,
            batch_hessians,
            member_hessians,
            mean_loss,
        })
    }

    pub fn from_polys(losses: Vec<PolyLoss>, batch_size: usize, x_star: Vec<f64>) -> Result<Self> {
        let losses = losses
            .into_iter()
            .map(|p| Arc::new(p) as Arc<dyn Objective>)
            .collect();
        Self::new(losses, batch_size, x_star)
    }

    /// `{f+, f_a}` with `B = 1` and `x* = 0`.
    pub fn prop1(a: f64) -> Result<Self> {
        Self::from_polys(vec![PolyLoss::f_plus(), PolyLoss::f_a(a)], 1, vec![0.0])
    }

    /// Univariate quadratics `h_i x^2 / 2` with `x* = 0`.
    pub fn quadratic(h: &[f64], batch_size: usize) -> Result<Self> {
        let losses = h.iter().map(|&hi| PolyLoss::f_a(hi)).collect();
        Self::from_polys(losses, batch_size, vec![0.0])
    }

    pub fn dim(&self) -> usize {
        self.x_star.len()
    }

    pub fn n(&self) -> usize {
        self.losses.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn x_star(&self) -> &[f64] {
        &self.x_star
    }

    pub fn losses(&self) -> &[Arc<dyn Objective>] {
        &self.losses
    }

    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn batch_loss(&self, i: usize) -> &dyn Objective {
        self.batch_losses[i].as_ref()
    }

    pub fn batch_hessians(&self) -> &[DMatrix<f64>] {
        &self.batch_hessians
    }

    pub fn member_hessians(&self) -> &[DMatrix<f64>] {
        &self.member_hessians
    }

    /// The full loss `(1/n) sum_i f_i`.
    pub fn mean_loss(&self) -> &dyn Objective {
        self.mean_loss.as_ref()
    }

    /// Same losses and minimizer with a different batch size.
    pub fn with_batch_size(&self, batch_size: usize) -> Result<Self> {
        Self::new(self.losses.clone(), batch_size, self.x_star.clone())
    }

    /// Whether every loss has an exact polynomial representation.
    pub fn is_polynomial(&self) -> bool {
        self.losses.iter().all(|l| l.as_poly().is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationCheck {
    pub grad_norms: Vec<f64>,
    pub min_eigenvalues: Vec<f64>,
    pub verdict: bool,
}

pub fn check_interpolating(ensemble: &LossEnsemble) -> InterpolationCheck {
    let x = ensemble.x_star();
    let grad_norms: Vec<f64> = ensemble
        .losses()
        .iter()
        .map(|l| l.gradient(x).iter().map(|g| g * g).sum::<f64>().sqrt())
        .collect();
    let min_eigenvalues: Vec<f64> = ensemble
        .member_hessians()
        .iter()
        .map(|h| {
            sym_eigen_capped(h, usize::MAX)
                .map(|e| e.min_eigenvalue())
                .unwrap_or(f64::NAN)
        })
        .collect();
    let verdict = grad_norms.iter().all(|g| *g <= INTERPOLATION_GRAD_TOL)
        && min_eigenvalues.iter().all(|l| *l > 0.0);
    InterpolationCheck {
        grad_norms,
        min_eigenvalues,
        verdict,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchThreshold {
    pub batch: Vec<usize>,
    pub lambda_max: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub per_batch_eta: Vec<BatchThreshold>,
    pub eta_sufficient: f64,
    pub eta_meansquare: Option<f64>,
    pub h: Option<f64>,
    pub s2: Option<f64>,
    pub p: Option<f64>,
}

fn max_eigenvalue(h: &DMatrix<f64>) -> Result<f64> {
    Ok(sym_eigen_capped(h, usize::MAX)?.max_eigenvalue())
}

/// Per-batch thresholds `2/lambda_max(H_B)` and their minimum. Univariate
/// ensembles also get the mean-square threshold.
pub fn sufficient_threshold(ensemble: &LossEnsemble) -> Result<ThresholdReport> {
    if !check_interpolating(ensemble).verdict {
        return Err(StabError::NotInterpolating);
    }
    let mut per_batch_eta = Vec::with_capacity(ensemble.num_batches());
    for (b, h) in ensemble.batches().iter().zip(ensemble.batch_hessians()) {
        let lambda_max = max_eigenvalue(h)?;
        per_batch_eta.push(BatchThreshold {
            batch: b.clone(),
            lambda_max,
            eta: 2.0 / lambda_max,
        });
    }
    let eta_sufficient = per_batch_eta
        .iter()
        .map(|b| b.eta)
        .fold(f64::INFINITY, f64::min);
    let (eta_meansquare, h, s2, p) = if ensemble.dim() == 1 {
        let s = meansquare_statistics(ensemble)?;
        (Some(s.eta_lin), Some(s.h), Some(s.s2), Some(s.p))
    } else {
        (None, None, None, None)
    };
    Ok(ThresholdReport {
        per_batch_eta,
        eta_sufficient,
        eta_meansquare,
        h,
        s2,
        p,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSquareStatistics {
    pub h: f64,
    pub s2: f64,
    pub p: f64,
    pub eta_lin: f64,
}

/// `h`, population variance `s2`, `p = (n-B)/(B(n-1))` and
/// `eta_lin = 2h/(h^2 + p s2)`.
pub fn meansquare_statistics(ensemble: &LossEnsemble) -> Result<MeanSquareStatistics> {
    if ensemble.dim() != 1 {
        return Err(StabError::InvalidArgument(format!(
            "mean-square threshold is univariate only, got d = {}",
            ensemble.dim()
        )));
    }
    let hs: Vec<f64> = ensemble.member_hessians().iter().map(|h| h[(0, 0)]).collect();
    let n = hs.len() as f64;
    let b = ensemble.batch_size() as f64;
    let h = hs.iter().sum::<f64>() / n;
    let s2 = hs.iter().map(|hi| (hi - h).powi(2)).sum::<f64>() / n;
    if hs.len() == ensemble.batch_size() {
        return Ok(MeanSquareStatistics {
            h,
            s2,
            p: 0.0,
            eta_lin: 2.0 / h,
        });
    }
    let p = (n - b) / (b * (n - 1.0));
    Ok(MeanSquareStatistics {
        h,
        s2,
        p,
        eta_lin: 2.0 * h / (h * h + p * s2),
    })
}

pub fn meansquare_threshold_univariate(ensemble: &LossEnsemble) -> Result<f64> {
    Ok(meansquare_statistics(ensemble)?.eta_lin)
}

/// Second-moment growth factor `E[(1 - eta h_B)^2]` of the linearized
/// univariate dynamics.
pub fn linearized_second_moment_factor(ensemble: &LossEnsemble, eta: f64) -> Result<f64> {
    check_dim(1, ensemble.dim())?;
    let n = ensemble.num_batches() as f64;
    Ok(ensemble
        .batch_hessians()
        .iter()
        .map(|h| (1.0 - eta * h[(0, 0)]).powi(2))
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchVerdict {
    pub batch_index: usize,
    pub batch: Vec<usize>,
    pub verdict: GrowthVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseReport {
    pub eta: f64,
    pub per_batch: Vec<BatchVerdict>,
    /// Index of the first batch whose GD diverges superlinearly.
    pub certifying_batch: Option<usize>,
    pub diverges_in_expectation: bool,
    pub conclusion: String,
}

/// GD restricted to each batch; any superlinearly diverging batch makes SGD
/// diverge in expectation.
pub fn worst_case_batch_report(
    ensemble: &LossEnsemble,
    eta: f64,
    x0: &[f64],
    horizon: usize,
) -> Result<WorstCaseReport> {
    check_dim(ensemble.dim(), x0.len())?;
    let per_batch = (0..ensemble.num_batches())
        .into_par_iter()
        .map(|i| {
            let verdict = superlinear_divergence_test(
                ensemble.batch_loss(i),
                x0,
                ensemble.x_star(),
                eta,
                horizon,
            )?
            .verdict;
            Ok(BatchVerdict {
                batch_index: i,
                batch: ensemble.batches()[i].clone(),
                verdict,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let certifying_batch = per_batch
        .iter()
        .find(|b| b.verdict == GrowthVerdict::Superlinear)
        .map(|b| b.batch_index);
    let conclusion = match certifying_batch {
        Some(i) => format!(
            "batch {i} {:?} diverges superlinearly under GD; SGD diverges in expectation",
            ensemble.batches()[i]
        ),
        None => "no superlinearly diverging batch; no divergence conclusion".to_string(),
    };
    Ok(WorstCaseReport {
        eta,
        diverges_in_expectation: certifying_batch.is_some(),
        certifying_batch,
        per_batch,
        conclusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_enumeration() {
        assert_eq!(
            enumerate_batches(4, 2).unwrap(),
            vec![
                vec![0, 1],
                vec![0, 2],
                vec![0, 3],
                vec![1, 2],
                vec![1, 3],
                vec![2, 3]
            ]
        );
        assert_eq!(enumerate_batches(3, 3).unwrap(), vec![vec![0, 1, 2]]);
        assert!(matches!(
            enumerate_batches(40, 20),
            Err(StabError::SizeCap { .. })
        ));
        assert_eq!(binomial(5, 2), 10);
    }

    #[test]
    fn prop1_is_interpolating() {
        let e = LossEnsemble::prop1(0.5).unwrap();
        let c = check_interpolating(&e);
        assert!(c.verdict);
        assert_eq!(c.min_eigenvalues, vec![1.0, 0.5]);
    }

    #[test]
    fn non_interpolating_examples() {
        // x^2 and (x-1)^2 = x^2 - 2x + 1
        let shifted = PolyLoss::from_terms(1, [(vec![2], 1.0), (vec![1], -2.0), (vec![0], 1.0)])
            .unwrap();
        let e = LossEnsemble::from_polys(vec![PolyLoss::f_a(2.0), shifted], 1, vec![0.0]).unwrap();
        assert!(!check_interpolating(&e).verdict);
        let quartic = PolyLoss::from_terms(1, [(vec![4], 1.0)]).unwrap();
        let e = LossEnsemble::from_polys(vec![quartic], 1, vec![0.0]).unwrap();
        assert!(!check_interpolating(&e).verdict);
        assert!(matches!(
            sufficient_threshold(&e),
            Err(StabError::NotInterpolating)
        ));
    }

    #[test]
    fn prop1_thresholds() {
        let e = LossEnsemble::prop1(0.5).unwrap();
        let r = sufficient_threshold(&e).unwrap();
        let etas: Vec<f64> = r.per_batch_eta.iter().map(|b| b.eta).collect();
        assert_eq!(etas, vec![2.0, 4.0]);
        assert_eq!(r.eta_sufficient, 2.0);
        assert_eq!(r.eta_meansquare, Some(2.4));
        let e = LossEnsemble::prop1(0.9).unwrap();
        let ms = meansquare_threshold_univariate(&e).unwrap();
        assert!((ms - 2.0 * 1.9 / 1.81).abs() < 1e-12);
    }

    #[test]
    fn full_batch_thresholds_coincide() {
        let e = LossEnsemble::prop1(0.5).unwrap().with_batch_size(2).unwrap();
        let r = sufficient_threshold(&e).unwrap();
        assert_eq!(r.per_batch_eta.len(), 1);
        assert!((r.eta_sufficient - 2.0 / 0.75).abs() < 1e-12);
        assert!((r.eta_meansquare.unwrap() - r.eta_sufficient).abs() < 1e-12);
    }

    #[test]
    fn equal_curvatures_give_two_over_h() {
        let e = LossEnsemble::quadratic(&[0.8, 0.8, 0.8], 1).unwrap();
        assert!((meansquare_threshold_univariate(&e).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn meansquare_rejects_multivariate() {
        let e = LossEnsemble::from_polys(vec![PolyLoss::l_beta(0.1)], 1, vec![0.0, 0.0]).unwrap();
        assert!(meansquare_threshold_univariate(&e).is_err());
    }

    #[test]
    fn batch_hessian_is_member_average() {
        let e = LossEnsemble::quadratic(&[1.0, 0.5, 0.2], 2).unwrap();
        let hs: Vec<f64> = e.batch_hessians().iter().map(|h| h[(0, 0)]).collect();
        assert_eq!(hs, vec![0.75, 0.6, 0.35]);
    }

    #[test]
    fn mean_objective_matches_poly_mean() {
        let a: Arc<dyn Objective> = Arc::new(PolyLoss::l_beta(0.3));
        let b: Arc<dyn Objective> = Arc::new(PolyLoss::l_beta(-0.1));
        let m = MeanObjective::new(vec![a, b]).unwrap();
        let p = PolyLoss::mean([&PolyLoss::l_beta(0.3), &PolyLoss::l_beta(-0.1)]).unwrap();
        let x = [0.3, -0.7];
        assert!((m.value(&x) - p.value(&x)).abs() < 1e-14);
        let t = m.derivative_tensor(&x, 3).unwrap();
        let u = p.derivative_tensor(&x, 3).unwrap();
        for (a, b) in t.data().iter().zip(u.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(m.exact_degree(), Some(4));
    }
}
