//! One function per experiment kind. Each returns the JSON results and the
//! plot series; nothing here touches the filesystem.

use rayon::prelude::*;
use serde_json::{json, Value};
use stablab_core::dynamics::{
    bifurcation_scan, exact_expectation, f_plus_bound_check, monte_carlo_second_moment, run_gd_with,
    run_sgd, superlinear_divergence_test, BifurcationScan, ScanOptions, ScanOutcome, SimOptions,
    Statistic, X0Sampler,
};
use stablab_core::moments::{
    assemble_truncation, batch_map_derivatives, moment_decay_check, rho_certificate_at,
    DEFAULT_K, DEFAULT_RHO_CAP,
};
use stablab_core::oscillation::{
    cycle_amplitude_estimate, profile_minimum, stable_oscillation_criterion,
    stable_oscillation_criterion_at,
};
use stablab_core::rng::derive_seed;
use stablab_core::sgd::{
    check_interpolating, linearized_second_moment_factor, sufficient_threshold,
    worst_case_batch_report, LossEnsemble,
};
use stablab_core::tensor::{operator_norm, PolyLoss};
use stablab_core::StabError;

use crate::acceptance;
use crate::config::{check_len, positive, ExperimentConfig, ExperimentKind, LossSpec, SamplerSpec, SgdMode};
use crate::error::CliError;
use crate::output::{coord_header, num, nums, to_value, Csv, RunOutput};

pub const DEFAULT_MAX_ITERS: usize = 10_000;
pub const DEFAULT_HORIZON: usize = 100;
pub const DEFAULT_SAMPLER_HALF_WIDTH: f64 = 0.5;
/// Largest truncation side for which the full matrix norm is measured.
pub const MEASURE_NORM_MAX_SIDE: usize = 2_000;

pub fn run(kind: ExperimentKind, config: &ExperimentConfig) -> Result<RunOutput, CliError> {
    if let Some(k) = config.experiment {
        if k != kind {
            return Err(CliError::Config(format!(
                "config declares experiment {k:?} but command is {kind:?}"
            )));
        }
    }
    let plain = |(results, csv): (Value, Csv)| RunOutput {
        command: kind,
        results,
        csv,
        failure: None,
        metadata: Value::Null,
    };
    Ok(match kind {
        ExperimentKind::AnalyzeMinimum => plain(analyze_minimum(config)?),
        ExperimentKind::Bifurcation => plain(bifurcation(config)?),
        ExperimentKind::SimulateGD => plain(simulate_gd(config)?),
        ExperimentKind::SimulateSGD => plain(simulate_sgd(config)?),
        ExperimentKind::SgdThresholds => plain(sgd_thresholds(config)?),
        ExperimentKind::MomentOperator => plain(moment_operator(config)?),
        ExperimentKind::VerifyAll => verify_all(config)?,
    })
}

fn x0_or(config: &ExperimentConfig, d: usize) -> Result<Vec<f64>, CliError> {
    let x0 = config
        .x0
        .clone()
        .ok_or_else(|| CliError::Config("this experiment needs `x0`".into()))?;
    check_len("x0", &x0, d)?;
    Ok(x0)
}

pub fn analyze_minimum(config: &ExperimentConfig) -> Result<(Value, Csv), CliError> {
    let loss = config.require_loss()?.build()?;
    let x_star = config.x_star_or_origin(loss.dim())?;
    let profile = profile_minimum(&loss, &x_star)?;
    let report = stable_oscillation_criterion(&profile)?;
    let at_eta = match config.eta {
        Some(eta) => {
            let eta = positive("eta", eta)?;
            let r = stable_oscillation_criterion_at(&profile, eta)?;
            Some(json!({
                "eta": eta,
                "c0": r.c0,
                "cycle_amplitude_estimate": cycle_amplitude_estimate(profile.eta_lin, eta, r.c0),
            }))
        }
        None => None,
    };
    let d = profile.dim();
    let mut csv = Csv::new(
        ["index".to_string(), "eigenvalue".to_string()]
            .into_iter()
            .chain(coord_header("v", d)),
    );
    for i in 0..d {
        let mut row = vec![i.to_string(), num(profile.eigen.eigenvalues[i])];
        row.extend(nums(&profile.eigen.eigenvector(i)));
        csv.push(row);
    }
    let results = json!({
        "profile": {
            "x_star": profile.x_star,
            "eigenvalues": profile.eigen.eigenvalues.as_slice(),
            "lambda_max": profile.lambda_max,
            "v_max": profile.v_max,
            "spectral_gap": profile.spectral_gap,
            "eta_lin": profile.eta_lin,
            "multiplicity_ok": profile.multiplicity_ok,
            "exact_derivatives": profile.tensors.exact,
        },
        "criterion": to_value(&report),
        "at_eta": at_eta,
    });
    Ok((results, csv))
}

fn scan_options(config: &ExperimentConfig, d: usize, root_seed: u64) -> Result<ScanOptions, CliError> {
    let mut o = ScanOptions {
        x_star: Some(config.x_star_or_origin(d)?),
        root_seed,
        ..ScanOptions::default()
    };
    if let Some(v) = config.burn_in {
        o.burn_in = v;
    }
    if let Some(v) = config.record {
        if v < 2 {
            return Err(CliError::Config("`record` must be at least 2".into()));
        }
        o.record = v;
    }
    if let Some(v) = config.cluster_eps {
        o.cluster_eps = positive("cluster_eps", v)?;
    }
    if let Some(v) = config.r_div {
        o.r_div = positive("r_div", v)?;
    }
    Ok(o)
}

fn sampler(config: &ExperimentConfig, d: usize) -> Result<X0Sampler, CliError> {
    Ok(match &config.sampler {
        None => X0Sampler::Uniform {
            half_width: DEFAULT_SAMPLER_HALF_WIDTH,
        },
        Some(SamplerSpec::Uniform { half_width }) => X0Sampler::Uniform {
            half_width: positive("half_width", *half_width)?,
        },
        Some(SamplerSpec::Fixed { x0 }) => {
            check_len("sampler.x0", x0, d)?;
            X0Sampler::Fixed(x0.clone())
        }
    })
}

pub fn outcome_name(o: ScanOutcome) -> &'static str {
    match o {
        ScanOutcome::FixedPoint => "FixedPoint",
        ScanOutcome::Cycle2 => "Cycle2",
        ScanOutcome::HigherPeriodOrChaos => "HigherPeriodOrChaos",
        ScanOutcome::Diverged => "Diverged",
    }
}

fn scan_summary(param: &str, values: &[f64], outcomes: &[ScanOutcome]) -> Value {
    let mut counts = serde_json::Map::new();
    for o in outcomes {
        let e = counts.entry(outcome_name(*o)).or_insert(json!(0));
        *e = json!(e.as_u64().unwrap_or(0) + 1);
    }
    let transitions: Vec<Value> = outcomes
        .windows(2)
        .zip(values.windows(2))
        .filter(|(o, _)| o[0] != o[1])
        .map(|(o, v)| json!({ "from": outcome_name(o[0]), "to": outcome_name(o[1]), param: v[1] }))
        .collect();
    json!({ "parameter": param, "cells": values.len(), "counts": counts, "transitions": transitions })
}

fn scan_csv(param: &str, d: usize, values: &[f64], scan_points: &[Vec<Vec<f64>>], outcomes: &[ScanOutcome]) -> Csv {
    let mut csv = Csv::new(
        [param.to_string(), "point_index".to_string()]
            .into_iter()
            .chain(coord_header("x", d))
            .chain(["outcome".to_string()]),
    );
    for ((v, pts), o) in values.iter().zip(scan_points).zip(outcomes) {
        if pts.is_empty() {
            let mut row = vec![num(*v), String::new()];
            row.extend(std::iter::repeat_n(String::new(), d));
            row.push(outcome_name(*o).into());
            csv.push(row);
        }
        for (j, p) in pts.iter().enumerate() {
            let mut row = vec![num(*v), j.to_string()];
            row.extend(nums(p));
            row.push(outcome_name(*o).into());
            csv.push(row);
        }
    }
    csv
}

pub fn bifurcation(config: &ExperimentConfig) -> Result<(Value, Csv), CliError> {
    let spec = config.require_loss()?;
    let d = spec.dim();
    let sampler = sampler(config, d)?;
    if let Some(grid) = &config.beta_grid {
        if !matches!(spec, LossSpec::LBeta { .. }) {
            return Err(CliError::Config("`beta_grid` needs the L_beta preset".into()));
        }
        let eta = config.require_eta()?;
        let betas = grid.values()?;
        let cells: Vec<(BifurcationScan, Value)> = betas
            .par_iter()
            .enumerate()
            .map(|(i, &beta)| {
                let loss = PolyLoss::l_beta(beta);
                let opts = scan_options(config, d, derive_seed(config.seed, &[i as u64]))?;
                let scan = bifurcation_scan(&loss, &[eta], &sampler, &opts)?;
                let x_star = opts.x_star.clone().unwrap_or_else(|| vec![0.0; d]);
                let verdict = profile_minimum(&loss, &x_star)
                    .and_then(|p| stable_oscillation_criterion(&p))
                    .map(|r| to_value(&r.verdict))?;
                Ok((scan, verdict))
            })
            .collect::<Result<_, CliError>>()?;
        let outcomes: Vec<ScanOutcome> = cells.iter().map(|(s, _)| s.outcome[0]).collect();
        let points: Vec<Vec<Vec<f64>>> = cells.iter().map(|(s, _)| s.accumulation_points[0].clone()).collect();
        let verdicts: Vec<Value> = cells.into_iter().map(|(_, v)| v).collect();
        let mut results = scan_summary("beta", &betas, &outcomes);
        results["eta"] = json!(eta);
        results["verdicts"] = json!(betas
            .iter()
            .zip(&verdicts)
            .zip(&outcomes)
            .map(|((b, v), o)| json!({"beta": b, "verdict": v, "outcome": outcome_name(*o)}))
            .collect::<Vec<_>>());
        return Ok((results, scan_csv("beta", d, &betas, &points, &outcomes)));
    }
    let loss = spec.build()?;
    let etas = config.eta_values()?;
    if let Some(bad) = etas.iter().find(|e| !(**e > 0.0)) {
        return Err(CliError::Config(format!("step sizes must be positive, got {bad}")));
    }
    let opts = scan_options(config, d, config.seed)?;
    let scan = bifurcation_scan(&loss, &etas, &sampler, &opts)?;
    let results = scan_summary("eta", &etas, &scan.outcome);
    let csv = scan_csv("eta", d, &etas, &scan.accumulation_points, &scan.outcome);
    Ok((results, csv))
}

pub fn simulate_gd(config: &ExperimentConfig) -> Result<(Value, Csv), CliError> {
    let spec = config.require_loss()?;
    let loss = spec.build()?;
    let d = loss.dim();
    let eta = config.require_eta()?;
    let x0 = x0_or(config, d)?;
    let x_star = config.x_star_or_origin(d)?;
    let mut opts = SimOptions {
        x_star: Some(x_star.clone()),
        ..SimOptions::default()
    };
    if let Some(r) = config.r_div {
        opts.r_div = positive("r_div", r)?;
    }
    let max_iters = config.max_iters.unwrap_or(DEFAULT_MAX_ITERS);
    let traj = run_gd_with(&loss, &x0, eta, max_iters, &opts)?;
    let growth = match config.horizon {
        Some(h) => Some(superlinear_divergence_test(&loss, &x0, &x_star, eta, h)?),
        None => None,
    };
    let bound = match (&growth, spec) {
        (Some(g), LossSpec::FPlus) => Some(f_plus_bound_check(eta, x0[0] - x_star[0], &g.distances)),
        _ => None,
    };
    let mut csv = Csv::new(
        ["t".to_string()]
            .into_iter()
            .chain(coord_header("x", d))
            .chain(["distance".to_string(), "loss".to_string()]),
    );
    for (t, x) in traj.iterates.iter().enumerate() {
        let dist = x.iter().zip(&x_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let mut row = vec![t.to_string()];
        row.extend(nums(x));
        row.push(num(dist));
        row.push(num(loss.value(x)));
        csv.push(row);
    }
    let results = json!({
        "eta": eta,
        "terminated": traj.terminated,
        "steps": traj.steps(),
        "final": traj.last(),
        "cycle": traj.cycle,
        "growth": growth.as_ref().map(|g| json!({
            "verdict": g.verdict,
            "overflowed": g.overflowed,
            "recorded": g.distances.len(),
            "max_root": g.roots.iter().copied().fold(0.0, f64::max),
        })),
        "bound_check": bound,
    });
    Ok((results, csv))
}

pub fn simulate_sgd(config: &ExperimentConfig) -> Result<(Value, Csv), CliError> {
    let ens = config.require_ensemble()?.build()?;
    let d = ens.dim();
    let eta = config.require_eta()?;
    let x0 = x0_or(config, d)?;
    match config.mode.unwrap_or(SgdMode::Trajectory) {
        SgdMode::Trajectory => {
            let traj = run_sgd(&ens, &x0, eta, config.max_iters.unwrap_or(1_000), config.seed)?;
            let mut csv = Csv::new(
                ["t".to_string(), "batch".to_string()]
                    .into_iter()
                    .chain(coord_header("x", d))
                    .chain(["distance".to_string()]),
            );
            let log = traj.batch_log.clone().unwrap_or_default();
            for (t, x) in traj.iterates.iter().enumerate() {
                let dist = x
                    .iter()
                    .zip(ens.x_star())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let batch = if t == 0 { String::new() } else { log[t - 1].to_string() };
                let mut row = vec![t.to_string(), batch];
                row.extend(nums(x));
                row.push(num(dist));
                csv.push(row);
            }
            let results = json!({
                "mode": "trajectory",
                "eta": eta,
                "seed": config.seed,
                "terminated": traj.terminated,
                "steps": traj.steps(),
                "final": traj.last(),
            });
            Ok((results, csv))
        }
        SgdMode::Exact => {
            let t_max = config.t_max.unwrap_or(20);
            let abs = exact_expectation(&ens, &x0, eta, t_max, Statistic::AbsDistance)?;
            let sq = exact_expectation(&ens, &x0, eta, t_max, Statistic::PowerK(2))?;
            let mut csv = Csv::new(["t", "mean_abs_distance", "mean_sq_distance"]);
            for t in 0..=t_max {
                csv.push(vec![t.to_string(), num(abs.values[t]), num(sq.values[t])]);
            }
            let results = json!({
                "mode": "exact",
                "eta": eta,
                "paths": abs.paths.to_string(),
                "saturated": abs.saturated || sq.saturated,
                "mean_abs_distance": abs.values,
                "mean_sq_distance": sq.values,
            });
            Ok((results, csv))
        }
        SgdMode::MonteCarlo => {
            let t_max = config.t_max.unwrap_or(200);
            let paths = config.paths.unwrap_or(100_000);
            let mc = monte_carlo_second_moment(&ens, &x0, eta, t_max, paths, config.seed)?;
            let linear = if d == 1 {
                Some(linearized_second_moment_factor(&ens, eta)?)
            } else {
                None
            };
            let mut csv = Csv::new(["t", "mean_sq_distance", "std_err"]);
            for t in 0..=t_max {
                csv.push(vec![t.to_string(), num(mc.mean[t]), num(mc.std_err[t])]);
            }
            let results = json!({
                "mode": "monte_carlo",
                "eta": eta,
                "paths": paths,
                "factor": mc.factor,
                "factor_std_err": mc.factor_std_err,
                "factor_samples": mc.factor_samples,
                "factorized_mean": mc.factorized_mean,
                "factorized_std_err": mc.factorized_std_err,
                "linearized_factor": linear,
                "final_mean": mc.mean[t_max],
                "final_std_err": mc.std_err[t_max],
            });
            Ok((results, csv))
        }
    }
}

fn default_probe(ens: &LossEnsemble) -> Vec<f64> {
    ens.x_star().iter().map(|c| c + 0.1).collect()
}

pub fn sgd_thresholds(config: &ExperimentConfig) -> Result<(Value, Csv), CliError> {
    let ens = config.require_ensemble()?.build()?;
    let interp = check_interpolating(&ens);
    let report = sufficient_threshold(&ens)?;
    let worst = match config.eta {
        Some(eta) => {
            let eta = positive("eta", eta)?;
            let x0 = match &config.x0 {
                Some(x) => {
                    check_len("x0", x, ens.dim())?;
                    x.clone()
                }
                None => default_probe(&ens),
            };
            Some(worst_case_batch_report(&ens, eta, &x0, config.horizon.unwrap_or(DEFAULT_HORIZON))?)
        }
        None => None,
    };
    let mut csv = Csv::new(["batch_index", "members", "lambda_max", "eta_threshold", "growth_verdict"]);
    for (i, b) in report.per_batch_eta.iter().enumerate() {
        let members = b.batch.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(" ");
        let verdict = worst
            .as_ref()
            .map(|w| format!("{:?}", w.per_batch[i].verdict))
            .unwrap_or_default();
        csv.push(vec![i.to_string(), members, num(b.lambda_max), num(b.eta), verdict]);
    }
    let results = json!({
        "interpolation": to_value(&interp),
        "thresholds": to_value(&report),
        "worst_case": worst.map(|w| to_value(&w)),
    });
    Ok((results, csv))
}

pub fn moment_operator(config: &ExperimentConfig) -> Result<(Value, Csv), CliError> {
    let ens = config.require_ensemble()?.build()?;
    let eta = config.require_eta()?;
    let k_max = config.k_max.unwrap_or(DEFAULT_K);
    if k_max == 0 {
        return Err(CliError::Config("`K` must be positive".into()));
    }
    if let Some(r) = config.rho {
        positive("rho", r)?;
    }
    let derivs = batch_map_derivatives(&ens, eta)?;
    let (certificate, cert_rho) = match rho_certificate_at(&derivs, config.rho) {
        Ok(c) => {
            let r = c.rho;
            (json!({ "available": true, "value": to_value(&c) }), Some(r))
        }
        Err(StabError::EpsilonNonPositive { epsilon }) => (
            json!({ "available": false, "error": "EpsilonNonPositive", "epsilon": epsilon }),
            None,
        ),
        Err(e) => return Err(e.into()),
    };
    let rho = config.rho.or(cert_rho).unwrap_or(DEFAULT_RHO_CAP);
    let trunc = assemble_truncation(&derivs, k_max, rho)?;
    let side: usize = (1..=k_max).map(|k| derivs.dim.pow(k as u32)).sum();
    let measured_norm = if side <= MEASURE_NORM_MAX_SIDE {
        Some(operator_norm(&trunc.to_matrix())?)
    } else {
        None
    };
    let divergence_note = if cert_rho.is_none() {
        let x0 = default_probe(&ens);
        let w = worst_case_batch_report(&ens, eta, &x0, DEFAULT_HORIZON)?;
        Some(json!({
            "certifying_batch": w.certifying_batch,
            "diverges_in_expectation": w.diverges_in_expectation,
            "conclusion": w.conclusion,
        }))
    } else {
        None
    };
    let x0 = match &config.x0 {
        Some(x) => {
            check_len("x0", x, ens.dim())?;
            Some(x.clone())
        }
        None => None,
    };
    let mut csv = Csv::new(["t", "k", "abs_error", "truncation_scale", "exact_norm", "predicted_norm"]);
    let decay = match x0 {
        Some(x0) => {
            let table = moment_decay_check(&ens, eta, &x0, k_max, rho, config.t_max.unwrap_or(10))?;
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for r in &table.rows {
                csv.push(vec![
                    r.t.to_string(),
                    r.k.to_string(),
                    num(r.abs_error),
                    num(r.truncation_scale),
                    num(norm(&r.exact)),
                    num(norm(&r.predicted)),
                ]);
            }
            Some(json!({ "max_error": table.max_error, "saturated": table.saturated, "x0": x0 }))
        }
        None => None,
    };
    let results = json!({
        "eta": eta,
        "K": k_max,
        "rho": rho,
        "max_order": derivs.max_order,
        "certified_derivatives": derivs.certified,
        "truncation": to_value(&trunc.summary()),
        "measured_norm": measured_norm,
        "certificate": certificate,
        "divergence_note": divergence_note,
        "decay": decay,
    });
    Ok((results, csv))
}

/// Runtimes go to the metadata block so that the report stays
/// byte-reproducible.
fn verify_all(config: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let spec = config.verify.clone().unwrap_or_default();
    let results = acceptance::run_selected(&spec, config.seed)?;
    let mut csv = Csv::new(["criterion", "name", "passed", "failures"]);
    let mut report = Vec::new();
    let mut runtimes = Vec::new();
    for r in &results {
        csv.push(vec![
            r.id.to_string(),
            r.name.replace(',', ";"),
            r.passed.to_string(),
            r.failures.len().to_string(),
        ]);
        report.push(json!({
            "id": r.id,
            "name": r.name,
            "passed": r.passed,
            "measured": r.measured,
            "failures": r.failures,
            "runtime_limit_secs": r.runtime_limit_secs,
        }));
        runtimes.push(json!({"id": r.id, "runtime_secs": r.runtime_secs}));
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.id.to_string()).collect();
    Ok(RunOutput {
        command: ExperimentKind::VerifyAll,
        results: Value::Array(report),
        csv,
        failure: (!failed.is_empty()).then(|| format!("criteria {} failed", failed.join(", "))),
        metadata: json!({"criterion_runtimes": runtimes}),
    })
}
