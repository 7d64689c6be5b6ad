//! Experiment configuration schema. Every object rejects unknown fields.

use serde::{Deserialize, Serialize};
use stablab_core::sgd::LossEnsemble;
use stablab_core::tensor::PolyLoss;

use crate::acceptance::Tolerances;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum ExperimentKind {
    #[value(name = "AnalyzeMinimum", alias = "analyze-minimum")]
    AnalyzeMinimum,
    #[value(name = "Bifurcation", alias = "bifurcation")]
    Bifurcation,
    #[value(name = "SimulateGD", alias = "simulate-gd")]
    SimulateGD,
    #[value(name = "SimulateSGD", alias = "simulate-sgd")]
    SimulateSGD,
    #[value(name = "SgdThresholds", alias = "sgd-thresholds")]
    SgdThresholds,
    #[value(name = "MomentOperator", alias = "moment-operator")]
    MomentOperator,
    #[value(name = "VerifyAll", alias = "verify-all")]
    VerifyAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub exps: Vec<u32>,
    pub coeff: f64,
}

/// A single loss: a named preset or inline polynomial terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", deny_unknown_fields)]
pub enum LossSpec {
    #[serde(rename = "f_plus")]
    FPlus,
    #[serde(rename = "f_minus")]
    FMinus,
    #[serde(rename = "f_a")]
    FA { a: f64 },
    #[serde(rename = "L_beta")]
    LBeta { beta: f64 },
    #[serde(rename = "quadratic")]
    Quadratic { h: Vec<f64> },
    #[serde(rename = "poly")]
    Poly { dim: usize, terms: Vec<Term> },
}

impl LossSpec {
    pub fn build(&self) -> Result<PolyLoss, CliError> {
        Ok(match self {
            LossSpec::FPlus => PolyLoss::f_plus(),
            LossSpec::FMinus => PolyLoss::f_minus(),
            LossSpec::FA { a } => PolyLoss::f_a(*a),
            LossSpec::LBeta { beta } => PolyLoss::l_beta(*beta),
            LossSpec::Quadratic { h } => {
                if h.is_empty() {
                    return Err(CliError::Config("quadratic needs at least one curvature".into()));
                }
                PolyLoss::diagonal_quadratic(h)
            }
            LossSpec::Poly { dim, terms } => {
                if *dim == 0 {
                    return Err(CliError::Config("poly dim must be positive".into()));
                }
                PolyLoss::from_terms(*dim, terms.iter().map(|t| (t.exps.clone(), t.coeff)))
                    .map_err(|e| CliError::Config(format!("poly terms: {e}")))?
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            LossSpec::LBeta { .. } => 2,
            LossSpec::Quadratic { h } => h.len(),
            LossSpec::Poly { dim, .. } => *dim,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", deny_unknown_fields)]
pub enum EnsembleSpec {
    /// `{f_plus, f_a}` with minimum at 0.
    #[serde(rename = "prop1")]
    Prop1 {
        a: f64,
        #[serde(default = "one")]
        batch_size: usize,
    },
    /// Univariate quadratics `h_i x^2 / 2`.
    #[serde(rename = "quadratic")]
    Quadratic {
        h: Vec<f64>,
        #[serde(default = "one")]
        batch_size: usize,
    },
    #[serde(rename = "members")]
    Members {
        losses: Vec<LossSpec>,
        #[serde(default = "one")]
        batch_size: usize,
        x_star: Option<Vec<f64>>,
    },
}

fn one() -> usize {
    1
}

impl EnsembleSpec {
    pub fn build(&self) -> Result<LossEnsemble, CliError> {
        let res = match self {
            EnsembleSpec::Prop1 { a, batch_size } => {
                LossEnsemble::prop1(*a).and_then(|e| e.with_batch_size(*batch_size))
            }
            EnsembleSpec::Quadratic { h, batch_size } => LossEnsemble::quadratic(h, *batch_size),
            EnsembleSpec::Members {
                losses,
                batch_size,
                x_star,
            } => {
                let polys = losses.iter().map(|l| l.build()).collect::<Result<Vec<_>, _>>()?;
                let d = polys.first().map(|p| p.dim()).unwrap_or(0);
                let x_star = x_star.clone().unwrap_or_else(|| vec![0.0; d]);
                LossEnsemble::from_polys(polys, *batch_size, x_star)
            }
        };
        res.map_err(|e| CliError::Config(format!("ensemble: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl Grid {
    pub fn values(&self) -> Result<Vec<f64>, CliError> {
        if !(self.step > 0.0) || !(self.end >= self.start) {
            return Err(CliError::Config(format!("invalid grid {self:?}")));
        }
        Ok(stablab_core::dynamics::eta_grid(self.start, self.end, self.step))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum SamplerSpec {
    #[serde(rename = "uniform")]
    Uniform { half_width: f64 },
    #[serde(rename = "fixed")]
    Fixed { x0: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SgdMode {
    #[serde(rename = "trajectory")]
    Trajectory,
    #[serde(rename = "exact")]
    Exact,
    #[serde(rename = "monte_carlo")]
    MonteCarlo,
}

/// Selection and tolerance overrides for `VerifyAll`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    /// Criterion ids to run; all when absent.
    pub criteria: Option<Vec<u32>>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<ExperimentKind>,
    /// Root seed; every stochastic cell derives its seed from it.
    #[serde(default)]
    pub seed: u64,
    pub loss: Option<LossSpec>,
    pub ensemble: Option<EnsembleSpec>,
    pub x_star: Option<Vec<f64>>,
    pub eta: Option<f64>,
    pub etas: Option<Vec<f64>>,
    pub eta_grid: Option<Grid>,
    /// `L_beta` sweep at fixed `eta` for `Bifurcation`.
    pub beta_grid: Option<Grid>,
    pub x0: Option<Vec<f64>>,
    pub sampler: Option<SamplerSpec>,
    pub max_iters: Option<usize>,
    pub horizon: Option<usize>,
    pub burn_in: Option<usize>,
    pub record: Option<usize>,
    pub cluster_eps: Option<f64>,
    pub r_div: Option<f64>,
    pub mode: Option<SgdMode>,
    pub t_max: Option<usize>,
    pub paths: Option<usize>,
    #[serde(rename = "K")]
    pub k_max: Option<usize>,
    pub rho: Option<f64>,
    pub verify: Option<VerifySpec>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn require_loss(&self) -> Result<&LossSpec, CliError> {
        self.loss
            .as_ref()
            .ok_or_else(|| CliError::Config("this experiment needs a `loss`".into()))
    }

    pub fn require_ensemble(&self) -> Result<&EnsembleSpec, CliError> {
        self.ensemble
            .as_ref()
            .ok_or_else(|| CliError::Config("this experiment needs an `ensemble`".into()))
    }

    pub fn require_eta(&self) -> Result<f64, CliError> {
        let eta = self
            .eta
            .ok_or_else(|| CliError::Config("this experiment needs `eta`".into()))?;
        positive("eta", eta)
    }

    pub fn x_star_or_origin(&self, d: usize) -> Result<Vec<f64>, CliError> {
        let x = self.x_star.clone().unwrap_or_else(|| vec![0.0; d]);
        check_len("x_star", &x, d)?;
        Ok(x)
    }

    pub fn eta_values(&self) -> Result<Vec<f64>, CliError> {
        match (&self.etas, &self.eta_grid) {
            (Some(_), Some(_)) => Err(CliError::Config("give either `etas` or `eta_grid`".into())),
            (Some(v), None) if !v.is_empty() => Ok(v.clone()),
            (None, Some(g)) => g.values(),
            _ => Err(CliError::Config("this experiment needs `etas` or `eta_grid`".into())),
        }
    }
}

pub fn positive(name: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Config(format!("`{name}` must be positive and finite, got {v}")))
    }
}

pub fn check_len(name: &str, v: &[f64], d: usize) -> Result<(), CliError> {
    if v.len() == d {
        Ok(())
    } else {
        Err(CliError::Config(format!("`{name}` has length {}, expected {d}", v.len())))
    }
}
