//! Acceptance criteria 1-9 with their tolerances. Shared by `stab VerifyAll`
//! and the `acceptance` integration test.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use stablab_core::dynamics::{
    bifurcation_scan, eta_grid, exact_expectation, f_plus_bound_check, monte_carlo_second_moment,
    run_gd_with, superlinear_divergence_test, BifurcationScan, GrowthVerdict, ScanOptions,
    ScanOutcome, SimOptions, Statistic, Termination, X0Sampler,
};
use stablab_core::instances::{random_poly, random_profile, random_quartic_2d, uniform_matrix};
use stablab_core::moments::{
    assemble_truncation, batch_map_derivatives, compositions, moment_decay_check, rho_certificate,
    rho_certificate_at,
};
use stablab_core::oscillation::{
    alternative_form, cycle_amplitude_estimate, hypothesized_sufficient_check, profile_minimum,
    stable_oscillation_criterion, stable_oscillation_criterion_at, Verdict, DEGENERACY_REL_TOL,
};
use stablab_core::rng::{cell_rng, derive_seed};
use stablab_core::sgd::{binomial, meansquare_statistics, sufficient_threshold, LossEnsemble};
use stablab_core::tensor::{
    fd_derivative_tensors, kron, kron_power, operator_norm, poly_derivative_tensors, sym_eigen,
    PolyLoss,
};
use stablab_core::StabError;

use crate::commands;
use crate::config::{ExperimentConfig, ExperimentKind, VerifySpec};
use crate::error::CliError;
use crate::output::render;

/// Tolerances, sample sizes and runtime limits; every field can be
/// overridden from a `VerifyAll` config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub c1_amplitude: f64,
    pub c1_runtime_secs: f64,
    pub c2_runtime_secs: f64,
    pub c3_band: f64,
    pub c3_runtime_secs: f64,
    pub c4_form_rel: f64,
    pub c4_instances: usize,
    pub c4_runtime_secs: f64,
    pub c5_cases: usize,
    pub c5_required: usize,
    pub c5_margin: f64,
    pub c5_runtime_secs: f64,
    pub c6_runtime_secs: f64,
    pub c7_sigmas: f64,
    pub c7_paths: usize,
    pub c7_runtime_secs: f64,
    pub c8_radius: f64,
    pub c8_decay_factor: f64,
    pub c8_runtime_secs: f64,
    pub c9_kron: f64,
    pub c9_fd: f64,
    pub c9_eigen: f64,
    pub c9_runtime_secs: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            c1_amplitude: 1e-6,
            c1_runtime_secs: 30.0,
            c2_runtime_secs: 10.0,
            c3_band: 1e-9,
            c3_runtime_secs: 60.0,
            c4_form_rel: 1e-10,
            c4_instances: 500,
            c4_runtime_secs: 10.0,
            c5_cases: 50,
            c5_required: 50,
            c5_margin: 0.05,
            c5_runtime_secs: 300.0,
            c6_runtime_secs: 120.0,
            c7_sigmas: 3.0,
            c7_paths: 100_000,
            c7_runtime_secs: 60.0,
            c8_radius: 1e-12,
            c8_decay_factor: 10.0,
            c8_runtime_secs: 120.0,
            c9_kron: 1e-12,
            c9_fd: 1e-4,
            c9_eigen: 1e-10,
            c9_runtime_secs: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub measured: Value,
    pub failures: Vec<String>,
    pub runtime_secs: f64,
    pub runtime_limit_secs: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        let mut s = format!(
            "{status} criterion {}: {} ({:.2}s of {:.0}s)",
            self.id, self.name, self.runtime_secs, self.runtime_limit_secs
        );
        if !self.failures.is_empty() {
            s.push_str(" :: ");
            s.push_str(&self.failures.join("; "));
        }
        s
    }
}

pub const CRITERIA: [(u32, &str); 9] = [
    (1, "f_minus bifurcation scan"),
    (2, "f_plus divergence and growth bound"),
    (3, "L_beta verdict flip and simulation"),
    (4, "criterion form equivalence"),
    (5, "C0 sign vs simulation"),
    (6, "two-loss ensemble thresholds and expectations"),
    (7, "mean-square threshold bracket"),
    (8, "moment-operator certificate"),
    (9, "property suites and replay"),
];

pub fn list() -> Vec<String> {
    CRITERIA.iter().map(|(id, name)| format!("{id}: {name}")).collect()
}

type Outcome = Result<(Value, Vec<String>), CliError>;

pub fn run_criterion(id: u32, tol: &Tolerances, seed: u64) -> Result<CriterionResult, CliError> {
    let (name, limit) = match id {
        1 => (CRITERIA[0].1, tol.c1_runtime_secs),
        2 => (CRITERIA[1].1, tol.c2_runtime_secs),
        3 => (CRITERIA[2].1, tol.c3_runtime_secs),
        4 => (CRITERIA[3].1, tol.c4_runtime_secs),
        5 => (CRITERIA[4].1, tol.c5_runtime_secs),
        6 => (CRITERIA[5].1, tol.c6_runtime_secs),
        7 => (CRITERIA[6].1, tol.c7_runtime_secs),
        8 => (CRITERIA[7].1, tol.c8_runtime_secs),
        9 => (CRITERIA[8].1, tol.c9_runtime_secs),
        _ => return Err(CliError::Config(format!("unknown criterion {id}"))),
    };
    let start = Instant::now();
    let root = derive_seed(seed, &[id as u64]);
    let (measured, mut failures) = match id {
        1 => criterion1(tol, root),
        2 => criterion2(root),
        3 => criterion3(tol),
        4 => criterion4(tol, root),
        5 => criterion5(tol, root),
        6 => criterion6(),
        7 => criterion7(tol, root),
        8 => criterion8(tol),
        _ => criterion9(tol, root),
    }?;
    let runtime_secs = start.elapsed().as_secs_f64();
    if runtime_secs > limit {
        failures.push(format!("runtime {runtime_secs:.2}s exceeds {limit}s"));
    }
    Ok(CriterionResult {
        id,
        name: name.to_string(),
        passed: failures.is_empty(),
        measured,
        failures,
        runtime_secs,
        runtime_limit_secs: limit,
    })
}

pub fn run_selected(spec: &VerifySpec, seed: u64) -> Result<Vec<CriterionResult>, CliError> {
    let ids: Vec<u32> = spec
        .criteria
        .clone()
        .unwrap_or_else(|| CRITERIA.iter().map(|(id, _)| *id).collect());
    ids.iter().map(|&id| run_criterion(id, &spec.tolerances, seed)).collect()
}

fn find(values: &[f64], target: f64) -> Option<usize> {
    values.iter().position(|v| (v - target).abs() < 1e-9)
}

/// Scan grid `1.01..=4.50`; it extends past 4 so that escape above 4.01 is
/// observed.
fn scan_grid() -> Vec<f64> {
    eta_grid(1.01, 4.5, 0.01)
}

fn scan(loss: &PolyLoss, half_width: f64, root: u64) -> Result<BifurcationScan, CliError> {
    let opts = ScanOptions {
        root_seed: root,
        ..ScanOptions::default()
    };
    Ok(bifurcation_scan(loss, &scan_grid(), &X0Sampler::Uniform { half_width }, &opts)?)
}

fn criterion1(tol: &Tolerances, root: u64) -> Outcome {
    let s = scan(&PolyLoss::f_minus(), 0.5, root)?;
    let mut failures = Vec::new();
    let below: Vec<f64> = s
        .etas
        .iter()
        .zip(&s.outcome)
        .filter(|(e, o)| **e < 2.0 - 1e-9 && **o != ScanOutcome::FixedPoint)
        .map(|(e, _)| *e)
        .collect();
    if !below.is_empty() {
        failures.push(format!("not FixedPoint below 2 at {below:?}"));
    }
    let mut amplitudes = Vec::new();
    for target in [2.1, 2.25, 2.5] {
        let i = find(&s.etas, target).expect("grid contains target");
        let eta = s.etas[i];
        let expect = ((eta - 2.0) / eta).sqrt();
        let err = s.accumulation_points[i]
            .iter()
            .map(|p| (p[0].abs() - expect).abs())
            .fold(0.0, f64::max);
        amplitudes.push(json!({"eta": target, "expected": expect, "points": s.accumulation_points[i], "max_error": err}));
        if s.outcome[i] != ScanOutcome::Cycle2 || err > tol.c1_amplitude {
            failures.push(format!("eta {target}: outcome {:?}, amplitude error {err:e}", s.outcome[i]));
        }
    }
    let not_div: Vec<f64> = s
        .etas
        .iter()
        .zip(&s.outcome)
        .filter(|(e, o)| **e > 4.01 + 1e-9 && **o != ScanOutcome::Diverged)
        .map(|(e, _)| *e)
        .collect();
    if !not_div.is_empty() {
        failures.push(format!("not Diverged above 4.01 at {not_div:?}"));
    }
    let sequence: Vec<Value> = s
        .outcome
        .windows(2)
        .zip(s.etas.windows(2))
        .filter(|(o, _)| o[0] != o[1])
        .map(|(o, e)| json!({"eta": e[1], "to": commands::outcome_name(o[1])}))
        .collect();
    Ok((json!({"amplitudes": amplitudes, "transitions": sequence, "cells": s.etas.len()}), failures))
}

fn criterion2(root: u64) -> Outcome {
    let s = scan(&PolyLoss::f_plus(), 0.05, root)?;
    let mut failures = Vec::new();
    let not_div: Vec<f64> = s
        .etas
        .iter()
        .zip(&s.outcome)
        .filter(|(e, o)| **e > 2.01 + 1e-9 && **o != ScanOutcome::Diverged)
        .map(|(e, _)| *e)
        .collect();
    if !not_div.is_empty() {
        failures.push(format!("not Diverged above 2.01 at {not_div:?}"));
    }
    let fixed_below = s
        .etas
        .iter()
        .zip(&s.outcome)
        .filter(|(e, _)| **e < 2.0 - 1e-9)
        .all(|(_, o)| *o == ScanOutcome::FixedPoint);
    let g = superlinear_divergence_test(&PolyLoss::f_plus(), &[0.5], &[0.0], 2.5, 60)?;
    if g.verdict != GrowthVerdict::Superlinear {
        failures.push(format!("growth verdict {:?}", g.verdict));
    }
    let b = f_plus_bound_check(2.5, 0.5, &g.distances);
    if !b.holds {
        failures.push(format!("bound violated at t = {:?}", b.first_violation));
    }
    Ok((
        json!({
            "fixed_point_below_2": fixed_below,
            "growth_verdict": g.verdict,
            "recorded_steps": g.distances.len(),
            "bound_check": b,
        }),
        failures,
    ))
}

fn lbeta_gap(beta: f64) -> Result<(f64, f64, Verdict), CliError> {
    let p = profile_minimum(&PolyLoss::l_beta(beta), &[0.0, 0.0])?;
    let r = stable_oscillation_criterion(&p)?;
    Ok((r.lhs - r.rhs, r.rhs, r.verdict))
}

/// Bisects for the `beta` where the verdict switches between `lo` and `hi`.
fn verdict_edge(mut lo: f64, mut hi: f64) -> Result<(f64, f64), CliError> {
    let v_lo = lbeta_gap(lo)?.2;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if lbeta_gap(mid)?.2 == v_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo, hi))
}

fn criterion3(tol: &Tolerances) -> Outcome {
    let mut failures = Vec::new();
    let mut verdicts = Vec::new();
    for beta in [0.1, 0.19, 0.2, 0.21, 0.5] {
        for s in [1.0, -1.0] {
            let b = s * beta;
            let (gap, _, v) = lbeta_gap(b)?;
            let expect = if beta < 0.2 {
                Verdict::UnstableCycle
            } else if beta > 0.2 {
                Verdict::StableCycle
            } else {
                Verdict::Degenerate
            };
            if v != expect {
                failures.push(format!("beta {b}: verdict {v:?}, expected {expect:?}"));
            }
            verdicts.push(json!({"beta": b, "lhs_minus_rhs": gap, "verdict": v}));
        }
    }
    // Edges of the Degenerate region around beta = 0.2.
    let (_, lower) = verdict_edge(0.19, 0.2)?;
    let (upper, _) = verdict_edge(0.2, 0.21)?;
    let (g_lo, rhs, _) = lbeta_gap(lower)?;
    let (g_hi, _, _) = lbeta_gap(upper)?;
    let width = g_hi - g_lo;
    let half_width_rel = 0.5 * width / (1.0 + rhs.abs());
    if half_width_rel > tol.c3_band * (1.0 + 1e-6) {
        failures.push(format!("degenerate band half-width {half_width_rel:e} relative"));
    }
    let betas = [-0.5, -0.21, -0.19, -0.1, 0.1, 0.19, 0.21, 0.5];
    let sims: Vec<(f64, Termination, Verdict)> = betas
        .par_iter()
        .map(|&b| {
            let loss = PolyLoss::l_beta(b);
            let opts = SimOptions {
                r_div: 0.5,
                ..SimOptions::default()
            };
            let t = run_gd_with(&loss, &[0.01, 0.0], 2.01, 40_000, &opts)?;
            Ok((b, t.terminated, lbeta_gap(b)?.2))
        })
        .collect::<Result<_, CliError>>()?;
    let mut agree = 0;
    let mut sim_rows = Vec::new();
    for (b, term, v) in &sims {
        let ok = match v {
            Verdict::StableCycle => *term == Termination::Cycle2,
            Verdict::UnstableCycle => *term == Termination::Diverged,
            Verdict::Degenerate => false,
        };
        agree += ok as usize;
        if !ok {
            failures.push(format!("beta {b}: simulation {term:?} vs verdict {v:?}"));
        }
        sim_rows.push(json!({"beta": b, "terminated": term, "verdict": v}));
    }
    Ok((
        json!({
            "verdicts": verdicts,
            "band": {"beta_low": lower, "beta_high": upper, "width": width, "half_width_relative": half_width_rel, "tolerance_relative": DEGENERACY_REL_TOL},
            "simulation": sim_rows,
            "agreement": format!("{agree}/{}", betas.len()),
        }),
        failures,
    ))
}

fn criterion4(tol: &Tolerances, root: u64) -> Outcome {
    let rows: Vec<(f64, bool)> = (0..tol.c4_instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = cell_rng(root, &[i as u64]);
            let p = random_profile(2 + i % 3, &mut rng)?;
            let r = stable_oscillation_criterion(&p)?;
            let alt = alternative_form(&p)?;
            let rel = (r.lhs - alt).abs() / r.lhs.abs().max(alt.abs()).max(f64::MIN_POSITIVE);
            let contained = !hypothesized_sufficient_check(&p)? || r.verdict == Verdict::StableCycle;
            Ok((rel, contained))
        })
        .collect::<Result<_, StabError>>()?;
    let worst = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let violations = rows.iter().filter(|r| !r.1).count();
    let mut failures = Vec::new();
    if worst > tol.c4_form_rel {
        failures.push(format!("worst relative form gap {worst:e}"));
    }
    if violations > 0 {
        failures.push(format!("{violations} containment violations"));
    }
    Ok((json!({"instances": rows.len(), "worst_relative_gap": worst, "containment_violations": violations}), failures))
}

#[derive(Debug, Clone, Serialize)]
struct C5Case {
    seed_index: u64,
    lhs_minus_rhs: f64,
    verdict: Verdict,
    escape_radius: f64,
    terminated: Termination,
    agrees: bool,
}

fn criterion5(tol: &Tolerances, root: u64) -> Outcome {
    let mut accepted = Vec::new();
    let mut attempt = 0u64;
    while accepted.len() < tol.c5_cases {
        if attempt > 1_000 * tol.c5_cases as u64 {
            return Err(CliError::Numeric(StabError::InvalidArgument(
                "instance generator rejected too many draws".into(),
            )));
        }
        let mut rng = cell_rng(root, &[attempt]);
        let loss = random_quartic_2d(&mut rng)?;
        let p = profile_minimum(&loss, &[0.0, 0.0])?;
        let r = stable_oscillation_criterion(&p)?;
        if p.multiplicity_ok && (r.lhs - r.rhs).abs() > tol.c5_margin {
            accepted.push((attempt, loss, p, r));
        }
        attempt += 1;
    }
    let cases: Vec<C5Case> = accepted
        .par_iter()
        .map(|(i, loss, p, r)| {
            let eta = p.eta_lin * 1.001;
            let c0 = stable_oscillation_criterion_at(p, eta)?.c0;
            let amp = cycle_amplitude_estimate(p.eta_lin, eta, c0.abs()).unwrap_or(0.0);
            let radius = (3.0 * amp).max(0.25);
            let x0: Vec<f64> = p.v_max.iter().map(|v| 1e-3 * v).collect();
            let opts = SimOptions {
                r_div: radius,
                ..SimOptions::default()
            };
            let t = run_gd_with(loss, &x0, eta, 60_000, &opts)?;
            let agrees = match r.verdict {
                Verdict::StableCycle => t.terminated == Termination::Cycle2,
                Verdict::UnstableCycle => t.terminated == Termination::Diverged,
                Verdict::Degenerate => false,
            };
            Ok(C5Case {
                seed_index: *i,
                lhs_minus_rhs: r.lhs - r.rhs,
                verdict: r.verdict,
                escape_radius: radius,
                terminated: t.terminated,
                agrees,
            })
        })
        .collect::<Result<_, StabError>>()?;
    let agree = cases.iter().filter(|c| c.agrees).count();
    let mut failures = Vec::new();
    if agree < tol.c5_required {
        let bad: Vec<String> = cases
            .iter()
            .filter(|c| !c.agrees)
            .map(|c| format!("#{} gap {:.4} {:?} -> {:?}", c.seed_index, c.lhs_minus_rhs, c.verdict, c.terminated))
            .collect();
        failures.push(format!("{agree}/{} agree; misses: {}", cases.len(), bad.join(", ")));
    }
    let stable = cases.iter().filter(|c| c.verdict == Verdict::StableCycle).count();
    Ok((
        json!({"agreement": format!("{agree}/{}", cases.len()), "stable_cases": stable, "draws": attempt, "cases": cases}),
        failures,
    ))
}

fn criterion6() -> Outcome {
    let e = LossEnsemble::prop1(0.5)?;
    let rep = sufficient_threshold(&e)?;
    let mut failures = Vec::new();
    if rep.eta_meansquare != Some(2.4) {
        failures.push(format!("eta_meansquare {:?}", rep.eta_meansquare));
    }
    if rep.eta_sufficient != 2.0 {
        failures.push(format!("eta_sufficient {}", rep.eta_sufficient));
    }
    let up = exact_expectation(&e, &[0.2], 2.1, 20, Statistic::AbsDistance)?;
    let down = exact_expectation(&e, &[0.2], 1.9, 20, Statistic::AbsDistance)?;
    // First t from which the series increases through t = 20.
    let onset = (0..20)
        .rev()
        .take_while(|&t| up.values[t + 1] > up.values[t])
        .last()
        .unwrap_or(20);
    if onset > 15 {
        failures.push(format!("eta 2.1 series increasing only from t = {onset}"));
    }
    let decreasing = down.values.windows(2).all(|w| w[1] < w[0]);
    if !decreasing {
        failures.push("eta 1.9 series not monotonically decreasing".into());
    }
    Ok((
        json!({
            "eta_meansquare": rep.eta_meansquare,
            "eta_sufficient": rep.eta_sufficient,
            "paths": up.paths.to_string(),
            "increasing_from": onset,
            "eta_2_1": up.values,
            "eta_2_1_saturated": up.saturated,
            "eta_1_9": down.values,
        }),
        failures,
    ))
}

fn criterion7(tol: &Tolerances, root: u64) -> Outcome {
    let e = LossEnsemble::quadratic(&[1.0, 0.5], 1)?;
    let eta_lin = meansquare_statistics(&e)?.eta_lin;
    let mut failures = Vec::new();
    let mut rows = Vec::new();
    for (i, (scale, growing)) in [(0.98, false), (1.02, true)].into_iter().enumerate() {
        let eta = scale * eta_lin;
        let mc = monte_carlo_second_moment(&e, &[1.0], eta, 200, tol.c7_paths, derive_seed(root, &[i as u64]))?;
        let z = (mc.factor - 1.0) / mc.factor_std_err;
        let ok = if growing { z > tol.c7_sigmas } else { z < -tol.c7_sigmas };
        if !ok {
            failures.push(format!("eta {scale} eta_lin: factor {} z {z:.2}", mc.factor));
        }
        rows.push(json!({
            "eta": eta,
            "factor": mc.factor,
            "factor_std_err": mc.factor_std_err,
            "z_vs_one": z,
            "factorized_second_moment_t200": mc.factorized_mean,
            "factorized_std_err_t200": mc.factorized_std_err,
            "naive_mean_t200": mc.mean[200],
            "naive_std_err_t200": mc.std_err[200],
        }));
    }
    Ok((json!({"eta_lin": eta_lin, "runs": rows}), failures))
}

fn criterion8(tol: &Tolerances) -> Outcome {
    let e = LossEnsemble::prop1(0.5)?;
    let mut failures = Vec::new();
    let y = batch_map_derivatives(&e, 1.0)?;
    let t = assemble_truncation(&y, 6, 0.1)?;
    if (t.spectral_radius - 0.25).abs() > tol.c8_radius {
        failures.push(format!("spectral radius {}", t.spectral_radius));
    }
    let measured = operator_norm(&t.to_matrix())?;
    let bound = (t.alpha * t.beta).sqrt();
    if bound < measured {
        failures.push(format!("norm bound {bound} below measured {measured}"));
    }
    let table = moment_decay_check(&e, 1.0, &[0.05], 6, 0.1, 10)?;
    let limit = tol.c8_decay_factor * 0.1f64.powi(6);
    if table.max_error[0] > limit {
        failures.push(format!("k=1 decay error {:e} > {limit:e}", table.max_error[0]));
    }
    let cert = rho_certificate(&y)?;
    if !(cert.rho_star > 0.0) {
        failures.push(format!("rho* = {}", cert.rho_star));
    }
    let y2 = batch_map_derivatives(&e, 2.1)?;
    let violating = match rho_certificate_at(&y2, Some(0.1)) {
        Err(StabError::EpsilonNonPositive { epsilon }) => json!({"error": "EpsilonNonPositive", "epsilon": epsilon}),
        other => {
            failures.push(format!("eta 2.1 certificate: {other:?}"));
            json!(null)
        }
    };
    let t2 = assemble_truncation(&y2, 6, 0.1)?;
    if !t2.diag_norms.windows(2).all(|w| w[1] > w[0]) {
        failures.push(format!("diagonal norms not increasing: {:?}", t2.diag_norms));
    }
    Ok((
        json!({
            "spectral_radius": t.spectral_radius,
            "norm_bound": bound,
            "measured_norm": measured,
            "decay_max_error": table.max_error,
            "decay_limit_k1": limit,
            "certificate": cert,
            "violating_certificate": violating,
            "violating_diag_norms": t2.diag_norms,
        }),
        failures,
    ))
}

fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

fn replay_bytes(config: &ExperimentConfig, kind: ExperimentKind, threads: usize) -> Result<(String, String), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let run = pool.install(|| commands::run(kind, config))?;
    Ok(render(config, &run))
}

fn criterion9(tol: &Tolerances, root: u64) -> Outcome {
    let mut failures = Vec::new();
    let mut kron_err = 0.0_f64;
    for i in 0..200u64 {
        let mut rng = cell_rng(root, &[0, i]);
        let n = 2 + (i % 2) as usize;
        let m: Vec<DMatrix<f64>> = (0..4).map(|_| uniform_matrix(n, n, &mut rng)).collect();
        let (x, yv) = (uniform_matrix(n, 1, &mut rng), uniform_matrix(n, 1, &mut rng));
        let p1 = max_diff(
            &(kron(&m[0], &m[1])? * kron(&m[2], &m[3])?),
            &kron(&(&m[0] * &m[2]), &(&m[1] * &m[3]))?,
        );
        let p2 = max_diff(&(kron(&m[0], &m[1])? * kron(&x, &yv)?), &kron(&(&m[0] * &x), &(&m[1] * &yv))?);
        let v: Vec<f64> = x.iter().copied().collect();
        let vn = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let pn = kron_power(&v, 4)?.iter().map(|a| a * a).sum::<f64>().sqrt();
        kron_err = kron_err.max(p1).max(p2).max((pn - vn.powi(4)).abs());
    }
    if kron_err > tol.c9_kron {
        failures.push(format!("Kronecker identities error {kron_err:e}"));
    }
    let mut exact_asym = 0.0_f64;
    let mut fd_asym = 0.0_f64;
    let mut fd_err = 0.0_f64;
    for i in 0..50u64 {
        let mut rng = cell_rng(root, &[1, i]);
        let d = 1 + (i % 3) as usize;
        let f = random_poly(d, 0, 4, 2.0, &mut rng)?;
        let x: Vec<f64> = uniform_matrix(d, 1, &mut rng).iter().copied().collect();
        let ex = poly_derivative_tensors(&f, &x)?;
        let fd = fd_derivative_tensors(|z| f.value(z), &x, 4)?;
        exact_asym = exact_asym.max(ex.d3.asymmetry()).max(ex.d4.asymmetry());
        fd_asym = fd_asym.max(fd.d3.asymmetry()).max(fd.d4.asymmetry());
        let pairs: [(&[f64], &[f64]); 4] = [
            (&ex.grad, &fd.grad),
            (ex.hess.as_slice(), fd.hess.as_slice()),
            (ex.d3.data(), fd.d3.data()),
            (ex.d4.data(), fd.d4.data()),
        ];
        for (a, b) in pairs {
            let scale = a.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            let e = a.iter().zip(b).fold(0.0_f64, |m, (u, w)| m.max((u - w).abs())) / scale;
            fd_err = fd_err.max(e);
        }
    }
    if exact_asym != 0.0 || fd_asym > 1e-6 {
        failures.push(format!("tensor asymmetry exact {exact_asym:e}, fd {fd_asym:e}"));
    }
    if fd_err > tol.c9_fd {
        failures.push(format!("finite-difference relative error {fd_err:e}"));
    }
    let mut comp_bad = 0;
    for p in 1..=12usize {
        for k in 1..=p {
            if compositions(p, k).len() as u128 != binomial(p as u64 - 1, k as u64 - 1) {
                comp_bad += 1;
            }
        }
    }
    if comp_bad > 0 {
        failures.push(format!("{comp_bad} composition counts wrong"));
    }
    let mut eig_err = 0.0_f64;
    for i in 0..200u64 {
        let mut rng = cell_rng(root, &[2, i]);
        let n = 1 + (i % 6) as usize;
        let m = uniform_matrix(n, n, &mut rng);
        let a = (&m + m.transpose()) * 0.5;
        let e = sym_eigen(&a)?;
        let orth = max_diff(&(e.eigenvectors.transpose() * &e.eigenvectors), &DMatrix::identity(n, n));
        eig_err = eig_err.max(max_diff(&e.reconstruct(), &a)).max(orth);
    }
    if eig_err > tol.c9_eigen {
        failures.push(format!("eigen reconstruction error {eig_err:e}"));
    }
    let replay_cfgs = [
        (
            ExperimentKind::SimulateSGD,
            r#"{"ensemble": {"preset": "prop1", "a": 0.5}, "eta": 1.5, "x0": [0.3], "max_iters": 200, "seed": 11}"#,
        ),
        (
            ExperimentKind::Bifurcation,
            r#"{"loss": {"preset": "f_minus"}, "eta_grid": {"start": 1.5, "end": 3.0, "step": 0.05}, "burn_in": 2000, "seed": 3}"#,
        ),
        (
            ExperimentKind::SimulateSGD,
            r#"{"ensemble": {"preset": "quadratic", "h": [1.0, 0.5]}, "eta": 1.0, "x0": [1.0], "mode": "monte_carlo", "paths": 5000, "t_max": 30, "seed": 5}"#,
        ),
    ];
    let mut replay = Vec::new();
    for (kind, text) in replay_cfgs {
        let cfg = ExperimentConfig::parse(text)?;
        let a = replay_bytes(&cfg, kind, 1)?;
        let b = replay_bytes(&cfg, kind, 4)?;
        let c = replay_bytes(&cfg, kind, 4)?;
        let same = a == b && b == c;
        if !same {
            failures.push(format!("{kind:?} replay differs"));
        }
        replay.push(json!({"command": kind, "byte_identical": same, "report_bytes": a.0.len(), "csv_bytes": a.1.len()}));
    }
    Ok((
        json!({
            "kronecker_max_error": kron_err,
            "exact_asymmetry": exact_asym,
            "fd_asymmetry": fd_asym,
            "fd_max_relative_error": fd_err,
            "composition_mismatches": comp_bad,
            "eigen_max_error": eig_err,
            "replay": replay,
        }),
        failures,
    ))
}
