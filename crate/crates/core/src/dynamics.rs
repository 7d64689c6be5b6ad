//! GD and SGD iterates, period-2 detection, bifurcation scans, a finite-horizon
//! superlinear growth test and exact expectations over batch sequences.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, StabError};
use crate::rng::{cell_rng, derive_seed, rng_from_seed};
use crate::sgd::{check_interpolating, LossEnsemble};
use crate::tensor::Objective;

pub const R_DIV: f64 = 1e6;
pub const OVERFLOW_GUARD: f64 = 1e300;
pub const CONVERGE_GRAD_TOL: f64 = 1e-12;
pub const CYCLE_TOL: f64 = 1e-9;
pub const CYCLE_WINDOW: usize = 8;
pub const CLUSTER_EPS: f64 = 1e-3;
pub const BURN_IN: usize = 10_000;
pub const RECORD: usize = 256;
/// Default cap on `N^t_max` for exhaustive enumeration.
pub const PATH_BUDGET: u128 = 1 << 24;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One GD step `x - eta * grad L(x)`.
pub fn gd_step(loss: &dyn Objective, x: &[f64], eta: f64) -> Result<Vec<f64>> {
    check_dim(loss.dim(), x.len())?;
    let g = loss.gradient(x);
    if !all_finite(&g) {
        return Err(StabError::NonFinite(format!("gradient at {x:?}")));
    }
    Ok(x.iter().zip(&g).map(|(xi, gi)| xi - eta * gi).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    MaxIters,
    Diverged,
    Converged,
    Cycle2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub iterates: Vec<Vec<f64>>,
    pub eta: f64,
    pub terminated: Termination,
    pub seed: Option<u64>,
    pub batch_log: Option<Vec<usize>>,
    /// The detected 2-cycle when `terminated == Cycle2`.
    pub cycle: Option<(Vec<f64>, Vec<f64>)>,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.iterates.last().expect("trajectory has x0")
    }

    pub fn steps(&self) -> usize {
        self.iterates.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Reference point for divergence; the origin when unset.
    pub x_star: Option<Vec<f64>>,
    pub r_div: f64,
    pub grad_tol: f64,
    pub cycle_tol: f64,
    pub cycle_window: usize,
    pub detect_cycles: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            x_star: None,
            r_div: R_DIV,
            grad_tol: CONVERGE_GRAD_TOL,
            cycle_tol: CYCLE_TOL,
            cycle_window: CYCLE_WINDOW,
            detect_cycles: true,
        }
    }
}

pub fn run_gd(loss: &dyn Objective, x0: &[f64], eta: f64, max_iters: usize) -> Result<Trajectory> {
    run_gd_with(loss, x0, eta, max_iters, &SimOptions::default())
}

pub fn run_gd_with(
    loss: &dyn Objective,
    x0: &[f64],
    eta: f64,
    max_iters: usize,
    opts: &SimOptions,
) -> Result<Trajectory> {
    check_dim(loss.dim(), x0.len())?;
    if !all_finite(x0) {
        return Err(StabError::NonFinite("initial point".into()));
    }
    let origin = vec![0.0; x0.len()];
    let x_star = opts.x_star.as_deref().unwrap_or(&origin);
    check_dim(x0.len(), x_star.len())?;
    let mut xs = vec![x0.to_vec()];
    let mut cycle = None;
    let terminated = loop {
        let x = xs.last().unwrap();
        if !all_finite(x) || dist(x, x_star) > opts.r_div {
            break Termination::Diverged;
        }
        let g = loss.gradient(x);
        if !all_finite(&g) {
            break Termination::Diverged;
        }
        if norm(&g) < opts.grad_tol {
            break Termination::Converged;
        }
        if opts.detect_cycles && xs.len() >= opts.cycle_window {
            if let Some(c) = detect_cycle2(&xs[xs.len() - opts.cycle_window..], opts.cycle_tol) {
                cycle = Some(c);
                break Termination::Cycle2;
            }
        }
        if xs.len() > max_iters {
            break Termination::MaxIters;
        }
        let next = x.iter().zip(&g).map(|(xi, gi)| xi - eta * gi).collect();
        xs.push(next);
    };
    Ok(Trajectory {
        iterates: xs,
        eta,
        terminated,
        seed: None,
        batch_log: None,
        cycle,
    })
}

/// SGD with batches drawn uniformly (with replacement across steps) from the
/// enumerated batch list. Cycle detection is off.
pub fn run_sgd(
    ensemble: &LossEnsemble,
    x0: &[f64],
    eta: f64,
    max_iters: usize,
    seed: u64,
) -> Result<Trajectory> {
    check_dim(ensemble.dim(), x0.len())?;
    if !all_finite(x0) {
        return Err(StabError::NonFinite("initial point".into()));
    }
    let mut rng = rng_from_seed(seed);
    let n_batches = ensemble.num_batches();
    let x_star = ensemble.x_star();
    let mut xs = vec![x0.to_vec()];
    let mut log = Vec::new();
    let terminated = loop {
        let x = xs.last().unwrap();
        if !all_finite(x) || dist(x, x_star) > R_DIV {
            break Termination::Diverged;
        }
        let full = ensemble.mean_loss().gradient(x);
        if !all_finite(&full) {
            break Termination::Diverged;
        }
        if norm(&full) < CONVERGE_GRAD_TOL {
            break Termination::Converged;
        }
        if xs.len() > max_iters {
            break Termination::MaxIters;
        }
        let b = rng.random_range(0..n_batches);
        let g = ensemble.batch_loss(b).gradient(x);
        log.push(b);
        let next = x.iter().zip(&g).map(|(xi, gi)| xi - eta * gi).collect();
        xs.push(next);
    };
    Ok(Trajectory {
        iterates: xs,
        eta,
        terminated,
        seed: Some(seed),
        batch_log: Some(log),
        cycle: None,
    })
}

/// A 2-cycle `(x1, x2)` when every `|x_{t+2} - x_t| < tol` and every
/// `|x_{t+1} - x_t| > 10 tol` in the window.
pub fn detect_cycle2(window: &[Vec<f64>], tol: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = window.len();
    if n < 4 {
        return None;
    }
    let closes = (0..n - 2).all(|t| dist(&window[t + 2], &window[t]) < tol);
    let moves = (0..n - 1).all(|t| dist(&window[t + 1], &window[t]) > 10.0 * tol);
    if closes && moves {
        Some((window[n - 2].clone(), window[n - 1].clone()))
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum X0Sampler {
    /// `x* + U(-half_width, half_width)^d`.
    Uniform { half_width: f64 },
    Fixed(Vec<f64>),
}

impl Default for X0Sampler {
    fn default() -> Self {
        X0Sampler::Uniform { half_width: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScanOutcome {
    FixedPoint,
    Cycle2,
    HigherPeriodOrChaos,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanOptions {
    pub x_star: Option<Vec<f64>>,
    pub burn_in: usize,
    pub record: usize,
    pub cluster_eps: f64,
    pub r_div: f64,
    pub root_seed: u64,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            x_star: None,
            burn_in: BURN_IN,
            record: RECORD,
            cluster_eps: CLUSTER_EPS,
            r_div: R_DIV,
            root_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BifurcationScan {
    pub etas: Vec<f64>,
    pub accumulation_points: Vec<Vec<Vec<f64>>>,
    pub outcome: Vec<ScanOutcome>,
}

/// Evenly spaced grid `start, start + step, ...` up to `end` inclusive
/// (within half a step).
pub fn eta_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step + 0.5).floor().max(0.0) as usize;
    (0..=n).map(|i| start + i as f64 * step).collect()
}

/// Clusters points with radius `eps`: leader assignment, then repeated
/// merging until all centers are more than `eps` apart.
pub fn cluster_points(points: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>> {
    let mut clusters: Vec<(Vec<f64>, Vec<f64>, usize)> = Vec::new();
    for p in points {
        match clusters.iter_mut().find(|(leader, _, _)| dist(leader, p) <= eps) {
            Some((_, sum, count)) => {
                sum.iter_mut().zip(p).for_each(|(s, v)| *s += v);
                *count += 1;
            }
            None => clusters.push((p.clone(), p.clone(), 1)),
        }
    }
    let mut centers: Vec<(Vec<f64>, usize)> = clusters
        .into_iter()
        .map(|(_, sum, c)| (sum.iter().map(|s| s / c as f64).collect(), c))
        .collect();
    loop {
        let mut merged = false;
        'outer: for i in 0..centers.len() {
            for j in (i + 1)..centers.len() {
                if dist(&centers[i].0, &centers[j].0) <= eps {
                    let (cj, nj) = centers.remove(j);
                    let (ci, ni) = &mut centers[i];
                    let total = (*ni + nj) as f64;
                    for (a, b) in ci.iter_mut().zip(&cj) {
                        *a = (*a * *ni as f64 + b * nj as f64) / total;
                    }
                    *ni += nj;
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            break;
        }
    }
    centers.into_iter().map(|(c, _)| c).collect()
}

fn scan_cell(
    loss: &dyn Objective,
    eta: f64,
    x0: Vec<f64>,
    x_star: &[f64],
    opts: &ScanOptions,
) -> (ScanOutcome, Vec<Vec<f64>>) {
    let escaped = |x: &[f64]| !all_finite(x) || dist(x, x_star) > opts.r_div;
    let step = |x: &[f64]| -> Vec<f64> {
        let g = loss.gradient(x);
        x.iter().zip(&g).map(|(xi, gi)| xi - eta * gi).collect()
    };
    let mut x = x0;
    for _ in 0..opts.burn_in {
        x = step(&x);
        if escaped(&x) {
            return (ScanOutcome::Diverged, Vec::new());
        }
    }
    let mut recorded = Vec::with_capacity(opts.record);
    for _ in 0..opts.record {
        x = step(&x);
        if escaped(&x) {
            return (ScanOutcome::Diverged, Vec::new());
        }
        recorded.push(x.clone());
    }
    let centers = cluster_points(&recorded, opts.cluster_eps);
    let outcome = match centers.len() {
        1 => ScanOutcome::FixedPoint,
        2 => ScanOutcome::Cycle2,
        _ => ScanOutcome::HigherPeriodOrChaos,
    };
    (outcome, centers)
}

/// Accumulation points of GD for each step size. Cell `i` draws its initial
/// point from a generator seeded by `(root_seed, i)`.
pub fn bifurcation_scan(
    loss: &dyn Objective,
    etas: &[f64],
    sampler: &X0Sampler,
    opts: &ScanOptions,
) -> Result<BifurcationScan> {
    let d = loss.dim();
    let origin = vec![0.0; d];
    let x_star = opts.x_star.clone().unwrap_or(origin);
    check_dim(d, x_star.len())?;
    if let X0Sampler::Fixed(x0) = sampler {
        check_dim(d, x0.len())?;
    }
    let cells: Vec<(ScanOutcome, Vec<Vec<f64>>)> = etas
        .par_iter()
        .enumerate()
        .map(|(i, &eta)| {
            let x0 = match sampler {
                X0Sampler::Fixed(x0) => x0.clone(),
                X0Sampler::Uniform { half_width } => {
                    let mut rng = cell_rng(opts.root_seed, &[i as u64]);
                    x_star
                        .iter()
                        .map(|c| c + rng.random_range(-*half_width..*half_width))
                        .collect()
                }
            };
            scan_cell(loss, eta, x0, &x_star, opts)
        })
        .collect();
    let (outcome, accumulation_points) = cells.into_iter().unzip();
    Ok(BifurcationScan {
        etas: etas.to_vec(),
        accumulation_points,
        outcome,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GrowthVerdict {
    Superlinear,
    AtMostLinear,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub verdict: GrowthVerdict,
    /// `|x_t - x*|` for every recorded step, stopping at the overflow guard.
    pub distances: Vec<f64>,
    /// `r_t = |x_t - x*|^{1/t}` for `t >= 1`.
    pub roots: Vec<f64>,
    pub overflowed: bool,
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2)
        .all(|w| w[1] > w[0] + 1e-9 * (1.0 + w[0].abs()))
}

/// Finite-horizon test of `|x_t - x*|^{1/t} -> infinity`.
///
/// Superlinear: some `r_t > 10`, and over the last quarter of the run both
/// `r_t` and the log-distance increments strictly increase. AtMostLinear:
/// the distance reaches zero, or the increments over the last quarter never
/// exceed the largest earlier increment. Anything else is Inconclusive.
pub fn superlinear_divergence_test(
    loss: &dyn Objective,
    x0: &[f64],
    x_star: &[f64],
    eta: f64,
    horizon: usize,
) -> Result<GrowthReport> {
    if horizon < 20 {
        return Err(StabError::InvalidArgument(format!(
            "horizon must be at least 20, got {horizon}"
        )));
    }
    check_dim(loss.dim(), x0.len())?;
    check_dim(x0.len(), x_star.len())?;
    let mut x = x0.to_vec();
    let mut distances = vec![dist(&x, x_star)];
    let mut overflowed = false;
    for _ in 0..horizon {
        let g = loss.gradient(&x);
        let next: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - eta * gi).collect();
        let r = dist(&next, x_star);
        if !r.is_finite() {
            overflowed = true;
            break;
        }
        distances.push(r);
        x = next;
        if r > OVERFLOW_GUARD {
            overflowed = true;
            break;
        }
    }
    let roots: Vec<f64> = distances
        .iter()
        .enumerate()
        .skip(1)
        .map(|(t, r)| r.powf(1.0 / t as f64))
        .collect();
    let verdict = classify_growth(&distances, &roots);
    Ok(GrowthReport {
        verdict,
        distances,
        roots,
        overflowed,
    })
}

fn classify_growth(distances: &[f64], roots: &[f64]) -> GrowthVerdict {
    if distances.contains(&0.0) {
        return GrowthVerdict::AtMostLinear;
    }
    let incs: Vec<f64> = distances.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
    if incs.len() < 4 {
        return GrowthVerdict::Inconclusive;
    }
    let tail = (incs.len() / 4).max(2);
    let inc_tail = &incs[incs.len() - tail..];
    let root_tail = &roots[roots.len() - tail..];
    let accelerating = strictly_increasing(inc_tail);
    if accelerating && strictly_increasing(root_tail) && roots.iter().any(|r| *r > 10.0) {
        return GrowthVerdict::Superlinear;
    }
    let head_max = incs[..incs.len() - tail]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let tail_max = inc_tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if tail_max <= head_max + 1e-9 * (1.0 + head_max.abs()) {
        return GrowthVerdict::AtMostLinear;
    }
    GrowthVerdict::Inconclusive
}

/// `log2` of the lower bound on `|x_t|` for GD on `f+` with `eta > 2`:
/// `(eta-1)^t |x0|` before `T`, then `2^{(3^{t-T+1}-1)/2}`, where `T` is the
/// first step with `(eta-1)^T |x0| > 2`.
pub fn f_plus_lower_bound_log2(eta: f64, x0: f64, t: usize) -> f64 {
    let t_star = f_plus_bound_start(eta, x0);
    match t_star {
        Some(big_t) if t >= big_t => {
            let e = (t - big_t + 1) as f64;
            (3f64.powf(e) - 1.0) / 2.0
        }
        _ => t as f64 * (eta - 1.0).log2() + x0.abs().log2(),
    }
}

/// First `T` with `(eta-1)^T |x0| > 2`, if `eta > 2` and `x0 != 0`.
pub fn f_plus_bound_start(eta: f64, x0: f64) -> Option<usize> {
    if !(eta > 2.0) || x0 == 0.0 || !x0.is_finite() {
        return None;
    }
    let mut v = x0.abs();
    let mut t = 0;
    while v <= 2.0 {
        v *= eta - 1.0;
        t += 1;
    }
    Some(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub t_star: Option<usize>,
    pub checked: usize,
    pub first_violation: Option<usize>,
    pub holds: bool,
}

/// Compares recorded distances of a GD run on `f+` with the analytic lower
/// bound at every step.
pub fn f_plus_bound_check(eta: f64, x0: f64, distances: &[f64]) -> BoundCheck {
    let t_star = f_plus_bound_start(eta, x0);
    let mut first_violation = None;
    for (t, r) in distances.iter().enumerate() {
        let bound = f_plus_lower_bound_log2(eta, x0, t);
        let actual = r.log2();
        if actual < bound - 1e-12 * (1.0 + bound.abs()) {
            first_violation = Some(t);
            break;
        }
    }
    BoundCheck {
        t_star,
        checked: distances.len(),
        holds: t_star.is_some() && first_violation.is_none(),
        first_violation,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Statistic {
    /// `|x_t - x*|`.
    AbsDistance,
    /// `sum_i (x_t - x*)_i^k`.
    PowerK(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationSeries {
    /// Values for `t = 0..=t_max`.
    pub values: Vec<f64>,
    /// Whether any path hit the `1e300` clamp.
    pub saturated: bool,
    pub paths: u128,
}

fn check_budget(n: usize, t_max: usize, budget: u128) -> Result<u128> {
    let mut paths: u128 = 1;
    for _ in 0..t_max {
        paths = paths.saturating_mul(n as u128);
    }
    if paths > budget {
        return Err(StabError::BudgetExceeded {
            requested: paths,
            budget,
        });
    }
    Ok(paths)
}

fn clamped_step(loss: &dyn Objective, x: &[f64], eta: f64, out: &mut Vec<f64>) -> bool {
    let g = loss.gradient(x);
    out.clear();
    let mut saturated = false;
    for (xi, gi) in x.iter().zip(&g) {
        let mut v = xi - eta * gi;
        if v.is_nan() {
            v = OVERFLOW_GUARD;
            saturated = true;
        } else if v.abs() > OVERFLOW_GUARD {
            v = OVERFLOW_GUARD.copysign(v);
            saturated = true;
        }
        out.push(v);
    }
    saturated
}

struct Enumerator<'a, F> {
    ensemble: &'a LossEnsemble,
    eta: f64,
    t_max: usize,
    width: usize,
    /// `N^{-t}` for each level.
    weights: Vec<f64>,
    stat: F,
}

struct Scratch {
    delta: Vec<f64>,
    values: Vec<f64>,
}

impl<F> Enumerator<'_, F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    fn scratch(&self, d: usize) -> Scratch {
        Scratch {
            delta: Vec::with_capacity(d),
            values: vec![0.0; self.width],
        }
    }

    /// Adds the clamped statistic of `x`, weighted by its path probability.
    fn accumulate(&self, x: &[f64], level: usize, acc: &mut [f64], s: &mut Scratch) -> bool {
        s.delta.clear();
        s.delta
            .extend(x.iter().zip(self.ensemble.x_star()).map(|(a, b)| a - b));
        (self.stat)(&s.delta, &mut s.values);
        let w = self.weights[level];
        let mut saturated = false;
        for (a, v) in acc.iter_mut().zip(&s.values) {
            let mut v = *v;
            if v.is_nan() {
                v = OVERFLOW_GUARD;
                saturated = true;
            } else if v.abs() > OVERFLOW_GUARD {
                v = OVERFLOW_GUARD.copysign(v);
                saturated = true;
            }
            *a += w * v;
        }
        saturated
    }

    /// Depth-first traversal below a node at `level`; `sums[l]` collects
    /// level `level + 1 + l`.
    fn dfs(&self, x: &[f64], level: usize, sums: &mut [Vec<f64>], saturated: &mut bool) {
        let mut s = self.scratch(x.len());
        let mut next = Vec::with_capacity(x.len());
        for b in 0..self.ensemble.num_batches() {
            *saturated |= clamped_step(self.ensemble.batch_loss(b), x, self.eta, &mut next);
            *saturated |= self.accumulate(&next, level + 1, &mut sums[0], &mut s);
            if level + 1 < self.t_max {
                self.dfs(&next, level + 1, &mut sums[1..], saturated);
            }
        }
    }

    /// Per-level means over all `N^t` sequences, `t = 0..=t_max`.
    fn run(&self, x0: &[f64]) -> (Vec<Vec<f64>>, bool) {
        let n = self.ensemble.num_batches();
        let mut sums = vec![vec![0.0; self.width]; self.t_max + 1];
        let mut s = self.scratch(x0.len());
        let mut saturated = self.accumulate(x0, 0, &mut sums[0], &mut s);
        // breadth-first to a frontier wide enough to parallelize over
        let mut frontier = vec![x0.to_vec()];
        let mut level = 0;
        while level < self.t_max && frontier.len() < 256 {
            let mut next_frontier = Vec::with_capacity(frontier.len() * n);
            for x in &frontier {
                for b in 0..n {
                    let mut next = Vec::with_capacity(x.len());
                    saturated |= clamped_step(self.ensemble.batch_loss(b), x, self.eta, &mut next);
                    saturated |= self.accumulate(&next, level + 1, &mut sums[level + 1], &mut s);
                    next_frontier.push(next);
                }
            }
            frontier = next_frontier;
            level += 1;
        }
        if level < self.t_max {
            let depth = self.t_max - level;
            let parts: Vec<(Vec<Vec<f64>>, bool)> = frontier
                .par_iter()
                .map(|x| {
                    let mut local = vec![vec![0.0; self.width]; depth];
                    let mut sat = false;
                    self.dfs(x, level, &mut local, &mut sat);
                    (local, sat)
                })
                .collect();
            for (local, sat) in parts {
                saturated |= sat;
                for (l, row) in local.iter().enumerate() {
                    for (a, b) in sums[level + 1 + l].iter_mut().zip(row) {
                        *a += b;
                    }
                }
            }
        }
        (sums, saturated)
    }
}

fn enumerate_means<F>(
    ensemble: &LossEnsemble,
    x0: &[f64],
    eta: f64,
    t_max: usize,
    width: usize,
    budget: u128,
    stat: F,
) -> Result<(Vec<Vec<f64>>, bool, u128)>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    check_dim(ensemble.dim(), x0.len())?;
    if !check_interpolating(ensemble).verdict {
        return Err(StabError::NotInterpolating);
    }
    let paths = check_budget(ensemble.num_batches(), t_max, budget)?;
    let n = ensemble.num_batches() as f64;
    let e = Enumerator {
        ensemble,
        eta,
        t_max,
        width,
        weights: (0..=t_max).map(|t| n.powi(-(t as i32))).collect(),
        stat,
    };
    let (sums, saturated) = e.run(x0);
    Ok((sums, saturated, paths))
}

/// `E[statistic(x_t - x*)]` for `t = 0..=t_max`, averaging uniformly over
/// every batch sequence.
pub fn exact_expectation(
    ensemble: &LossEnsemble,
    x0: &[f64],
    eta: f64,
    t_max: usize,
    statistic: Statistic,
) -> Result<ExpectationSeries> {
    exact_expectation_with_budget(ensemble, x0, eta, t_max, statistic, PATH_BUDGET)
}

pub fn exact_expectation_with_budget(
    ensemble: &LossEnsemble,
    x0: &[f64],
    eta: f64,
    t_max: usize,
    statistic: Statistic,
    budget: u128,
) -> Result<ExpectationSeries> {
    let stat = move |delta: &[f64], out: &mut [f64]| {
        out[0] = match statistic {
            Statistic::AbsDistance => norm(delta),
            Statistic::PowerK(k) => delta.iter().map(|v| v.powi(k as i32)).sum(),
        };
    };
    let (sums, saturated, paths) = enumerate_means(ensemble, x0, eta, t_max, 1, budget, stat)?;
    Ok(ExpectationSeries {
        values: sums.into_iter().map(|r| r[0]).collect(),
        saturated,
        paths,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KronMoments {
    /// `moments[t][k-1] = E[(x_t - x*)^{(x)k}]`.
    pub moments: Vec<Vec<Vec<f64>>>,
    pub saturated: bool,
    pub paths: u128,
}

/// Exact Kronecker-power moments up to order `k_max`.
pub fn exact_kron_moments(
    ensemble: &LossEnsemble,
    x0: &[f64],
    eta: f64,
    t_max: usize,
    k_max: usize,
    budget: u128,
) -> Result<KronMoments> {
    let d = ensemble.dim();
    if k_max == 0 {
        return Err(StabError::InvalidArgument("k_max must be positive".into()));
    }
    let mut sizes = Vec::with_capacity(k_max);
    let mut total: u128 = 0;
    for k in 1..=k_max {
        let s = crate::tensor::checked_power(d, k, crate::tensor::KRON_ENTRY_CAP)?;
        total += s as u128;
        sizes.push(s);
    }
    let width = total as usize;
    let stat = |delta: &[f64], out: &mut [f64]| {
        let mut power = delta.to_vec();
        let mut offset = 0;
        for k in 1..=k_max {
            if k > 1 {
                power = crate::tensor::kron_vec(&power, delta);
            }
            out[offset..offset + power.len()].copy_from_slice(&power);
            offset += power.len();
        }
    };
    let (sums, saturated, paths) = enumerate_means(ensemble, x0, eta, t_max, width, budget, stat)?;
    let moments = sums
        .into_iter()
        .map(|row| {
            let mut out = Vec::with_capacity(k_max);
            let mut offset = 0;
            for s in &sizes {
                out.push(row[offset..offset + s].to_vec());
                offset += s;
            }
            out
        })
        .collect();
    Ok(KronMoments {
        moments,
        saturated,
        paths,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloMoments {
    pub paths: usize,
    /// Sample mean of `|x_t - x*|^2`, `t = 0..=t_max`.
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Mean of the per-step ratios `|x_{s+1} - x*|^2 / |x_s - x*|^2` over all
    /// paths and steps.
    pub factor: f64,
    pub factor_std_err: f64,
    pub factor_samples: u64,
    /// `factor^t_max |x0 - x*|^2` and its delta-method standard error.
    pub factorized_mean: f64,
    pub factorized_std_err: f64,
}

const MC_CHUNK: usize = 1024;

#[derive(Clone)]
struct McAccumulator {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    ratio_sum: f64,
    ratio_sum_sq: f64,
    ratio_count: u64,
}

impl McAccumulator {
    fn new(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            sum_sq: vec![0.0; len],
            ratio_sum: 0.0,
            ratio_sum_sq: 0.0,
            ratio_count: 0,
        }
    }

    fn merge(&mut self, other: &McAccumulator) {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        self.ratio_sum += other.ratio_sum;
        self.ratio_sum_sq += other.ratio_sum_sq;
        self.ratio_count += other.ratio_count;
    }
}

/// Monte-Carlo second moments of SGD. Path `i` uses the seed
/// `derive_seed(root_seed, [i])`; aggregation order is fixed, so results do
/// not depend on the thread count.
pub fn monte_carlo_second_moment(
    ensemble: &LossEnsemble,
    x0: &[f64],
    eta: f64,
    t_max: usize,
    paths: usize,
    root_seed: u64,
) -> Result<MonteCarloMoments> {
    check_dim(ensemble.dim(), x0.len())?;
    if paths < 2 {
        return Err(StabError::InvalidArgument("need at least two paths".into()));
    }
    let n_batches = ensemble.num_batches();
    let x_star = ensemble.x_star();
    let chunks: Vec<McAccumulator> = (0..paths.div_ceil(MC_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = McAccumulator::new(t_max + 1);
            for p in (c * MC_CHUNK)..((c + 1) * MC_CHUNK).min(paths) {
                let mut rng = rng_from_seed(derive_seed(root_seed, &[p as u64]));
                let mut x = x0.to_vec();
                let mut r2 = dist(&x, x_star).powi(2);
                acc.sum[0] += r2;
                acc.sum_sq[0] += r2 * r2;
                for t in 1..=t_max {
                    let b = rng.random_range(0..n_batches);
                    let g = ensemble.batch_loss(b).gradient(&x);
                    x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi -= eta * gi);
                    let next = dist(&x, x_star).powi(2);
                    if r2 > 0.0 && next.is_finite() {
                        let ratio = next / r2;
                        acc.ratio_sum += ratio;
                        acc.ratio_sum_sq += ratio * ratio;
                        acc.ratio_count += 1;
                    }
                    r2 = next;
                    acc.sum[t] += r2;
                    acc.sum_sq[t] += r2 * r2;
                }
            }
            acc
        })
        .collect();
    let mut total = McAccumulator::new(t_max + 1);
    for c in &chunks {
        total.merge(c);
    }
    let np = paths as f64;
    let mean: Vec<f64> = total.sum.iter().map(|s| s / np).collect();
    let std_err = total
        .sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            let var = (sq / np - m * m).max(0.0) * np / (np - 1.0);
            (var / np).sqrt()
        })
        .collect();
    let m = total.ratio_count as f64;
    let factor = total.ratio_sum / m;
    let factor_var = (total.ratio_sum_sq / m - factor * factor).max(0.0) * m / (m - 1.0);
    let factor_std_err = (factor_var / m).sqrt();
    let r0 = dist(x0, x_star).powi(2);
    let tm = t_max as f64;
    let factorized_mean = factor.powf(tm) * r0;
    let factorized_std_err = tm * factor.powf(tm - 1.0) * factor_std_err * r0;
    Ok(MonteCarloMoments {
        paths,
        mean,
        std_err,
        factor,
        factor_std_err,
        factor_samples: total.ratio_count,
        factorized_mean,
        factorized_std_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::PolyLoss;

    #[test]
    fn gd_step_examples() {
        let x = gd_step(&PolyLoss::f_minus(), &[0.5], 2.0).unwrap();
        assert!((x[0] + 0.25).abs() < 1e-15);
        let x = gd_step(&PolyLoss::f_plus(), &[1.0], 3.0).unwrap();
        assert!((x[0] + 5.0).abs() < 1e-15);
        assert_eq!(gd_step(&PolyLoss::l_beta(0.3), &[0.0, 0.0], 2.0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn run_gd_examples() {
        let t = run_gd(&PolyLoss::f_minus(), &[0.3], 1.5, 10_000).unwrap();
        assert_eq!(t.terminated, Termination::Converged);
        assert!(t.last()[0].abs() < 1e-10);

        let t = run_gd(&PolyLoss::f_minus(), &[0.3], 2.5, 10_000).unwrap();
        assert_eq!(t.terminated, Termination::Cycle2);
        let (a, b) = t.cycle.unwrap();
        assert!((a[0].abs() - 0.2f64.sqrt()).abs() < 1e-8);
        assert!((a[0] + b[0]).abs() < 1e-8);

        let t = run_gd(&PolyLoss::f_plus(), &[0.1], 2.1, 10_000).unwrap();
        assert_eq!(t.terminated, Termination::Diverged);
        assert!(t.last()[0].abs() > R_DIV || !t.last()[0].is_finite());
    }

    #[test]
    fn cycle_detection_cases() {
        let a = 0.2f64.sqrt();
        let alt: Vec<Vec<f64>> = (0..8).map(|i| vec![if i % 2 == 0 { a } else { -a }]).collect();
        assert!(detect_cycle2(&alt, CYCLE_TOL).is_some());
        let constant = vec![vec![0.5]; 8];
        assert!(detect_cycle2(&constant, CYCLE_TOL).is_none());
        let p4 = [0.1, 0.5, 0.2, 0.6];
        let four: Vec<Vec<f64>> = (0..8).map(|i| vec![p4[i % 4]]).collect();
        assert!(detect_cycle2(&four, CYCLE_TOL).is_none());
        assert!(detect_cycle2(&alt[..3], CYCLE_TOL).is_none());
    }

    #[test]
    fn clustering_merges_close_centers() {
        // leaders 0 and 0.0012 give centers 0.00045 and 0.0012, which merge
        let pts = vec![vec![0.0], vec![0.0009], vec![0.0012], vec![1.0]];
        let c = cluster_points(&pts, 1e-3);
        assert_eq!(c.len(), 2);
        for i in 0..c.len() {
            for j in (i + 1)..c.len() {
                assert!(dist(&c[i], &c[j]) > 1e-3);
            }
        }
    }

    #[test]
    fn growth_verdicts() {
        let r = superlinear_divergence_test(&PolyLoss::f_plus(), &[0.5], &[0.0], 2.5, 100).unwrap();
        assert_eq!(r.verdict, GrowthVerdict::Superlinear);
        assert!(r.overflowed);
        assert!(f_plus_bound_check(2.5, 0.5, &r.distances).holds);

        let quad = PolyLoss::f_a(1.0);
        let r = superlinear_divergence_test(&quad, &[0.5], &[0.0], 3.0, 100).unwrap();
        assert_eq!(r.verdict, GrowthVerdict::AtMostLinear);

        let r = superlinear_divergence_test(&PolyLoss::f_minus(), &[0.3], &[0.0], 2.5, 100).unwrap();
        assert_eq!(r.verdict, GrowthVerdict::AtMostLinear);

        assert!(superlinear_divergence_test(&quad, &[0.5], &[0.0], 3.0, 10).is_err());
    }

    #[test]
    fn f_plus_bound_start_index() {
        // 1.5^4 * 0.5 = 2.53 > 2, 1.5^3 * 0.5 = 1.69
        assert_eq!(f_plus_bound_start(2.5, 0.5), Some(4));
        assert_eq!(f_plus_lower_bound_log2(2.5, 0.5, 4), 1.0);
        assert_eq!(f_plus_lower_bound_log2(2.5, 0.5, 5), 4.0);
        assert_eq!(f_plus_bound_start(1.9, 0.5), None);
    }

    #[test]
    fn single_batch_expectation_matches_gd() {
        let e = LossEnsemble::from_polys(vec![PolyLoss::f_minus()], 1, vec![0.0]).unwrap();
        let s = exact_expectation(&e, &[0.3], 2.5, 30, Statistic::AbsDistance).unwrap();
        let t = run_gd_with(
            e.batch_loss(0),
            &[0.3],
            2.5,
            30,
            &SimOptions {
                detect_cycles: false,
                grad_tol: 0.0,
                ..SimOptions::default()
            },
        )
        .unwrap();
        for (v, x) in s.values.iter().zip(&t.iterates) {
            assert_eq!(*v, x[0].abs());
        }
    }

    #[test]
    fn quadratic_second_moment_recursion() {
        let e = LossEnsemble::quadratic(&[1.0, 0.5], 1).unwrap();
        let eta = 1.3;
        let s = exact_expectation(&e, &[0.2], eta, 12, Statistic::PowerK(2)).unwrap();
        let factor = crate::sgd::linearized_second_moment_factor(&e, eta).unwrap();
        for t in 0..12 {
            let expect = s.values[t] * factor;
            assert!((s.values[t + 1] - expect).abs() <= 1e-12 * expect.abs().max(1e-300));
        }
    }

    #[test]
    fn enumeration_budget() {
        let e = LossEnsemble::prop1(0.5).unwrap();
        let r = exact_expectation_with_budget(&e, &[0.2], 1.0, 10, Statistic::AbsDistance, 512);
        assert!(matches!(r, Err(StabError::BudgetExceeded { .. })));
    }

    #[test]
    fn saturation_is_flagged() {
        let e = LossEnsemble::prop1(0.5).unwrap();
        let s = exact_expectation(&e, &[0.9], 3.5, 12, Statistic::AbsDistance).unwrap();
        assert!(s.saturated);
        assert!(s.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sgd_replays_bit_for_bit() {
        let e = LossEnsemble::prop1(0.5).unwrap();
        let a = run_sgd(&e, &[0.5], 1.0, 200, 42).unwrap();
        let b = run_sgd(&e, &[0.5], 1.0, 200, 42).unwrap();
        assert_eq!(a, b);
        let log = a.batch_log.as_ref().unwrap();
        for (t, &bi) in log.iter().enumerate() {
            let x = gd_step(e.batch_loss(bi), &a.iterates[t], 1.0).unwrap();
            assert_eq!(x, a.iterates[t + 1]);
        }
    }

    #[test]
    fn sgd_examples() {
        let e = LossEnsemble::prop1(0.5).unwrap();
        let t = run_sgd(&e, &[0.5], 1.0, 100_000, 1).unwrap();
        assert_eq!(t.terminated, Termination::Converged);

        let full = e.with_batch_size(2).unwrap();
        let s = run_sgd(&full, &[0.4], 1.2, 50, 9).unwrap();
        let mean = PolyLoss::mean([&PolyLoss::f_plus(), &PolyLoss::f_a(0.5)]).unwrap();
        let g = run_gd_with(
            &mean,
            &[0.4],
            1.2,
            s.steps(),
            &SimOptions {
                detect_cycles: false,
                ..SimOptions::default()
            },
        )
        .unwrap();
        assert_eq!(s.iterates, g.iterates);
    }
}
