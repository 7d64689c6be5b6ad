//! Period-2 oscillations of GD at the edge of stability.
//!
//! At a minimum `x*` with top Hessian eigenpair `(lambda_max, v)`, GD with
//! step size just above `2/lambda_max` settles on a stable 2-cycle iff
//!
//! ```text
//! D3[v]^2[q] > D4[v]^4,   q = H^{-1} * 3 D3[v]^2
//! ```
//!
//! Equivalently `3 sum_i (D3[v]^2[v_i])^2 / lambda_i > D4[v]^4`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StabError};
use crate::tensor::{sym_eigen, DerivativeTensors, Objective, SymEigen};

pub const DEFAULT_GRAD_TOL: f64 = 1e-8;
pub const DEFAULT_GAP_TOL: f64 = 1e-6;
pub const DEGENERACY_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    pub grad_tol: f64,
    pub gap_tol: f64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            grad_tol: DEFAULT_GRAD_TOL,
            gap_tol: DEFAULT_GAP_TOL,
        }
    }
}

/// Eigen-decomposed local minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimumProfile {
    pub x_star: Vec<f64>,
    pub tensors: DerivativeTensors,
    pub eigen: SymEigen,
    pub lambda_max: f64,
    pub v_max: Vec<f64>,
    /// `(lambda_max - lambda_2) / lambda_max`; 1 when `d = 1`.
    pub spectral_gap: f64,
    pub eta_lin: f64,
    pub multiplicity_ok: bool,
}

impl MinimumProfile {
    pub fn dim(&self) -> usize {
        self.x_star.len()
    }
}

pub fn profile_minimum(loss: &dyn Objective, x_star: &[f64]) -> Result<MinimumProfile> {
    profile_minimum_with(loss, x_star, ProfileOptions::default())
}

pub fn profile_minimum_with(
    loss: &dyn Objective,
    x_star: &[f64],
    opts: ProfileOptions,
) -> Result<MinimumProfile> {
    let tensors = loss.derivative_tensors(x_star)?;
    profile_from_tensors(tensors, opts)
}

/// Builds a profile from precomputed derivative tensors.
pub fn profile_from_tensors(
    tensors: DerivativeTensors,
    opts: ProfileOptions,
) -> Result<MinimumProfile> {
    if tensors.grad.iter().any(|g| !g.is_finite()) {
        return Err(StabError::NonFinite("gradient at candidate minimum".into()));
    }
    let norm = tensors.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > opts.grad_tol {
        return Err(StabError::GradientNotZero {
            norm,
            tol: opts.grad_tol,
        });
    }
    let eigen = sym_eigen(&tensors.hess)?;
    let lambda_min = eigen.min_eigenvalue();
    if lambda_min <= 0.0 {
        return Err(StabError::HessianNotPD {
            min_eigenvalue: lambda_min,
        });
    }
    let d = eigen.dim();
    let lambda_max = eigen.max_eigenvalue();
    let spectral_gap = if d == 1 {
        1.0
    } else {
        (lambda_max - eigen.eigenvalues[d - 2]) / lambda_max
    };
    Ok(MinimumProfile {
        x_star: tensors.point.clone(),
        v_max: eigen.eigenvector(d - 1),
        eta_lin: 2.0 / lambda_max,
        multiplicity_ok: spectral_gap > opts.gap_tol,
        lambda_max,
        spectral_gap,
        eigen,
        tensors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    StableCycle,
    UnstableCycle,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationReport {
    pub q: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub lhs_alt: f64,
    /// Step size at which `c0` is evaluated.
    pub eta: f64,
    pub c0: f64,
    pub verdict: Verdict,
    pub multiplicity_ok: bool,
    pub sufficient_check: bool,
}

/// `D3[v]^2`, the vector `sum_jk T_ijk v_j v_k`.
fn d3_vv(profile: &MinimumProfile, v: &[f64]) -> Result<Vec<f64>> {
    profile.tensors.d3.eval_vector(v)
}

fn solve_hessian(profile: &MinimumProfile, b: &[f64]) -> Result<Vec<f64>> {
    let h: DMatrix<f64> = profile.tensors.hess.clone();
    let chol = h.cholesky().ok_or(StabError::SingularHessian)?;
    let x = chol.solve(&DVector::from_column_slice(b));
    if x.iter().any(|v| !v.is_finite()) {
        return Err(StabError::SingularHessian);
    }
    Ok(x.iter().copied().collect())
}

/// `q = H^{-1} * 3 D3[v_max]^2`.
pub fn q_vector(profile: &MinimumProfile) -> Result<Vec<f64>> {
    let g: Vec<f64> = d3_vv(profile, &profile.v_max)?
        .into_iter()
        .map(|x| 3.0 * x)
        .collect();
    if g.iter().all(|x| *x == 0.0) {
        return Ok(vec![0.0; g.len()]);
    }
    solve_hessian(profile, &g)
}

/// `3 sum_i (D3[v_max]^2[v_i])^2 / lambda_i`.
pub fn alternative_form(profile: &MinimumProfile) -> Result<f64> {
    let w = d3_vv(profile, &profile.v_max)?;
    let mut total = 0.0;
    for i in 0..profile.dim() {
        let lambda = profile.eigen.eigenvalues[i];
        if lambda <= 0.0 {
            return Err(StabError::SingularHessian);
        }
        let vi = profile.eigen.eigenvectors.column(i);
        let proj: f64 = w.iter().zip(vi.iter()).map(|(a, b)| a * b).sum();
        total += proj * proj / lambda;
    }
    Ok(3.0 * total)
}

fn lhs_rhs(profile: &MinimumProfile, q: &[f64]) -> Result<(f64, f64)> {
    let w = d3_vv(profile, &profile.v_max)?;
    let lhs = w.iter().zip(q).map(|(a, b)| a * b).sum();
    let rhs = profile.tensors.d4.eval_power(&profile.v_max)?;
    Ok((lhs, rhs))
}

/// First Lyapunov coefficient `C0 = (eta/6)(D3[v]^2[q] - D4[v]^4)`.
pub fn lyapunov_coefficient(profile: &MinimumProfile, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(StabError::InvalidArgument(format!(
            "step size must be positive, got {eta}"
        )));
    }
    let q = q_vector(profile)?;
    let (lhs, rhs) = lhs_rhs(profile, &q)?;
    Ok(eta / 6.0 * (lhs - rhs))
}

/// Closed-form sufficient condition: `3 (D3[v]^3)^2 / lambda_max > D4[v]^4` or `D4[v]^4 < 0`.
/// True implies a stable cycle; the converse fails in general.
pub fn hypothesized_sufficient_check(profile: &MinimumProfile) -> Result<bool> {
    let v = &profile.v_max;
    let t3 = profile.tensors.d3.eval_power(v)?;
    let t4 = profile.tensors.d4.eval_power(v)?;
    let t2: f64 = profile.lambda_max;
    Ok(3.0 * t3 * t3 / t2 > t4 || t4 < 0.0)
}

/// Leading-order 2-cycle amplitude `sqrt(2 delta / C0)` along `v_max`, with
/// `delta = eta / eta_lin - 1` and `C0` evaluated at `eta`. `None` unless
/// `eta > eta_lin` and `C0 > 0`.
pub fn cycle_amplitude_estimate(eta_lin: f64, eta: f64, c0: f64) -> Option<f64> {
    let delta = eta / eta_lin - 1.0;
    (delta > 0.0 && c0 > 0.0).then(|| (2.0 * delta / c0).sqrt())
}

pub fn classify(lhs: f64, rhs: f64, multiplicity_ok: bool) -> Verdict {
    if !multiplicity_ok || (lhs - rhs).abs() <= DEGENERACY_REL_TOL * (1.0 + rhs.abs()) {
        Verdict::Degenerate
    } else if lhs > rhs {
        Verdict::StableCycle
    } else {
        Verdict::UnstableCycle
    }
}

/// Evaluates the criterion with `C0` at `eta_lin`.
pub fn stable_oscillation_criterion(profile: &MinimumProfile) -> Result<OscillationReport> {
    stable_oscillation_criterion_at(profile, profile.eta_lin)
}

pub fn stable_oscillation_criterion_at(
    profile: &MinimumProfile,
    eta: f64,
) -> Result<OscillationReport> {
    let q = q_vector(profile)?;
    let (lhs, rhs) = lhs_rhs(profile, &q)?;
    Ok(OscillationReport {
        lhs_alt: alternative_form(profile)?,
        c0: lyapunov_coefficient(profile, eta)?,
        verdict: classify(lhs, rhs, profile.multiplicity_ok),
        multiplicity_ok: profile.multiplicity_ok,
        sufficient_check: hypothesized_sufficient_check(profile)?,
        eta,
        q,
        lhs,
        rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn amplitude_estimate_is_exact_for_f_minus() {
        let p = profile_minimum(&PolyLoss::f_minus(), &[0.0]).unwrap();
        for eta in [2.1, 2.25, 2.5] {
            let c0 = lyapunov_coefficient(&p, eta).unwrap();
            let a = cycle_amplitude_estimate(p.eta_lin, eta, c0).unwrap();
            assert!((a - ((eta - 2.0) / eta).sqrt()).abs() < 1e-12);
        }
        assert!(cycle_amplitude_estimate(2.0, 1.9, 1.0).is_none());
    }
    use crate::tensor::PolyLoss;

    fn criterion(loss: &PolyLoss) -> (MinimumProfile, OscillationReport) {
        let x = vec![0.0; loss.dim()];
        let p = profile_minimum(loss, &x).unwrap();
        let r = stable_oscillation_criterion(&p).unwrap();
        (p, r)
    }

    #[test]
    fn l_beta_profile() {
        let (p, _) = criterion(&PolyLoss::l_beta(0.5));
        assert_eq!(p.lambda_max, 1.0);
        assert_eq!(p.v_max, vec![1.0, 0.0]);
        assert_eq!(p.eta_lin, 2.0);
        assert!(p.multiplicity_ok);
    }

    #[test]
    fn l_beta_verdicts() {
        let (_, r) = criterion(&PolyLoss::l_beta(0.5));
        assert!((r.q[0]).abs() < 1e-14 && (r.q[1] - 15.0).abs() < 1e-12);
        assert!((r.lhs - 15.0).abs() < 1e-12);
        assert!((r.rhs - 2.4).abs() < 1e-12);
        assert_eq!(r.verdict, Verdict::StableCycle);
        assert!(!r.sufficient_check);

        let (_, r) = criterion(&PolyLoss::l_beta(0.1));
        assert!((r.lhs - 0.6).abs() < 1e-12);
        assert_eq!(r.verdict, Verdict::UnstableCycle);

        let (_, r) = criterion(&PolyLoss::l_beta(0.2));
        assert_eq!(r.verdict, Verdict::Degenerate);
        assert!(r.c0.abs() < 1e-12);
    }

    #[test]
    fn univariate_presets() {
        let (p, r) = criterion(&PolyLoss::f_minus());
        assert_eq!(p.eta_lin, 2.0);
        assert_eq!(r.lhs, 0.0);
        assert_eq!(r.rhs, -6.0);
        assert_eq!(r.verdict, Verdict::StableCycle);
        assert!((r.c0 - 2.0).abs() < 1e-14);
        assert!(r.sufficient_check);

        let (_, r) = criterion(&PolyLoss::f_plus());
        assert_eq!(r.verdict, Verdict::UnstableCycle);
        assert!((r.c0 + 2.0).abs() < 1e-14);
        assert!(!r.sufficient_check);
    }

    #[test]
    fn univariate_q_is_scalar_ratio() {
        // L = x^2 + x^3: L'' = 2, L''' = 6 -> q = 3 * 6 / 2 = 9
        let p = PolyLoss::from_terms(1, [(vec![2], 1.0), (vec![3], 1.0)]).unwrap();
        let prof = profile_minimum(&p, &[0.0]).unwrap();
        assert!((q_vector(&prof).unwrap()[0] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_quadratic_is_degenerate() {
        let p = PolyLoss::diagonal_quadratic(&[1.0, 1.0]);
        let (prof, r) = criterion(&p);
        assert!(!prof.multiplicity_ok);
        assert_eq!(r.verdict, Verdict::Degenerate);
    }

    #[test]
    fn profile_errors() {
        let p = PolyLoss::f_plus();
        assert!(matches!(
            profile_minimum(&p, &[0.1]),
            Err(StabError::GradientNotZero { .. })
        ));
        let saddle = PolyLoss::diagonal_quadratic(&[1.0, -1.0]);
        assert!(matches!(
            profile_minimum(&saddle, &[0.0, 0.0]),
            Err(StabError::HessianNotPD { .. })
        ));
    }
}
