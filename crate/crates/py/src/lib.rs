//! Python module `stablab`: losses, ensembles and the main analyses. Report
//! objects come back as plain dicts.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;
use stablab_core::dynamics::{
    bifurcation_scan, exact_expectation, run_gd_with, ScanOptions, SimOptions, Statistic, X0Sampler,
};
use stablab_core::moments::{
    assemble_truncation, batch_map_derivatives, rho_certificate_at, DEFAULT_K, DEFAULT_RHO_CAP,
};
use stablab_core::oscillation::{profile_minimum, stable_oscillation_criterion, stable_oscillation_criterion_at};
use stablab_core::sgd::{sufficient_threshold, LossEnsemble};
use stablab_core::tensor::PolyLoss;
use stablab_core::StabError;

fn err(e: StabError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Polynomial loss with exact derivatives.
#[pyclass(name = "PolyLoss", module = "stablab", frozen, from_py_object)]
#[derive(Clone)]
struct PyPolyLoss(PolyLoss);

#[pymethods]
impl PyPolyLoss {
    /// Builds `sum c * x^exps` from `[(exps, c), ...]`.
    #[new]
    fn new(dim: usize, terms: Vec<(Vec<u32>, f64)>) -> PyResult<Self> {
        PolyLoss::from_terms(dim, terms).map(Self).map_err(err)
    }

    #[staticmethod]
    fn f_plus() -> Self {
        Self(PolyLoss::f_plus())
    }

    #[staticmethod]
    fn f_minus() -> Self {
        Self(PolyLoss::f_minus())
    }

    #[staticmethod]
    fn f_a(a: f64) -> Self {
        Self(PolyLoss::f_a(a))
    }

    #[staticmethod]
    fn l_beta(beta: f64) -> Self {
        Self(PolyLoss::l_beta(beta))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn degree(&self) -> u32 {
        self.0.degree()
    }

    fn value(&self, x: Vec<f64>) -> PyResult<f64> {
        self.check(&x)?;
        Ok(self.0.value(&x))
    }

    fn gradient(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check(&x)?;
        Ok(self.0.gradient(&x))
    }

    /// Order-`order` derivative tensor, flattened row-major.
    fn derivative(&self, x: Vec<f64>, order: usize) -> PyResult<Vec<f64>> {
        let t = self.0.derivative_tensor(&x, order).map_err(err)?;
        Ok(t.data().to_vec())
    }

    fn __repr__(&self) -> String {
        format!("PolyLoss(dim={}, terms={:?})", self.0.dim(), self.0.terms())
    }
}

impl PyPolyLoss {
    fn check(&self, x: &[f64]) -> PyResult<()> {
        if x.len() != self.0.dim() {
            return Err(PyValueError::new_err(format!(
                "expected {} coordinates, got {}",
                self.0.dim(),
                x.len()
            )));
        }
        Ok(())
    }
}

/// Finite family of sample losses with a batch size.
#[pyclass(name = "LossEnsemble", module = "stablab", frozen)]
struct PyLossEnsemble(LossEnsemble);

#[pymethods]
impl PyLossEnsemble {
    #[new]
    #[pyo3(signature = (losses, batch_size=1, x_star=None))]
    fn new(losses: Vec<PyPolyLoss>, batch_size: usize, x_star: Option<Vec<f64>>) -> PyResult<Self> {
        let d = losses.first().map(|l| l.0.dim()).unwrap_or(0);
        let polys = losses.into_iter().map(|l| l.0).collect();
        LossEnsemble::from_polys(polys, batch_size, x_star.unwrap_or_else(|| vec![0.0; d]))
            .map(Self)
            .map_err(err)
    }

    /// `{f_plus, f_a}` with batch size 1.
    #[staticmethod]
    fn prop1(a: f64) -> PyResult<Self> {
        LossEnsemble::prop1(a).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (h, batch_size=1))]
    fn quadratic(h: Vec<f64>, batch_size: usize) -> PyResult<Self> {
        LossEnsemble::quadratic(&h, batch_size).map(Self).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

/// Spectral profile and oscillation verdict at a minimum.
#[pyfunction]
#[pyo3(signature = (loss, x_star=None, eta=None))]
fn analyze_minimum<'py>(
    py: Python<'py>,
    loss: &PyPolyLoss,
    x_star: Option<Vec<f64>>,
    eta: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let x_star = x_star.unwrap_or_else(|| vec![0.0; loss.0.dim()]);
    let p = profile_minimum(&loss.0, &x_star).map_err(err)?;
    let r = match eta {
        Some(eta) => stable_oscillation_criterion_at(&p, eta),
        None => stable_oscillation_criterion(&p),
    }
    .map_err(err)?;
    to_py(py, &r)
}

/// Deterministic GD run; returns the trajectory.
#[pyfunction]
#[pyo3(signature = (loss, x0, eta, max_iters=10_000, r_div=None))]
fn run_gd<'py>(
    py: Python<'py>,
    loss: &PyPolyLoss,
    x0: Vec<f64>,
    eta: f64,
    max_iters: usize,
    r_div: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut opts = SimOptions::default();
    if let Some(r) = r_div {
        opts.r_div = r;
    }
    let t = run_gd_with(&loss.0, &x0, eta, max_iters, &opts).map_err(err)?;
    to_py(py, &t)
}

/// Long-run behaviour of GD for each step size.
#[pyfunction]
#[pyo3(signature = (loss, etas, half_width=0.5, seed=0))]
fn bifurcation<'py>(
    py: Python<'py>,
    loss: &PyPolyLoss,
    etas: Vec<f64>,
    half_width: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = ScanOptions {
        root_seed: seed,
        ..ScanOptions::default()
    };
    let s = bifurcation_scan(&loss.0, &etas, &X0Sampler::Uniform { half_width }, &opts).map_err(err)?;
    to_py(py, &s)
}

#[pyfunction]
fn sgd_thresholds<'py>(py: Python<'py>, ensemble: &PyLossEnsemble) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &sufficient_threshold(&ensemble.0).map_err(err)?)
}

/// Exact `E|x_t - x*|` for `t = 0..=t_max` over all batch sequences.
#[pyfunction]
fn expected_distance(ensemble: &PyLossEnsemble, x0: Vec<f64>, eta: f64, t_max: usize) -> PyResult<Vec<f64>> {
    let s = exact_expectation(&ensemble.0, &x0, eta, t_max, Statistic::AbsDistance).map_err(err)?;
    Ok(s.values)
}

/// Truncated moment operator summary and, when available, its certificate.
#[pyfunction]
#[pyo3(signature = (ensemble, eta, k=DEFAULT_K, rho=DEFAULT_RHO_CAP))]
fn moment_operator<'py>(
    py: Python<'py>,
    ensemble: &PyLossEnsemble,
    eta: f64,
    k: usize,
    rho: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let y = batch_map_derivatives(&ensemble.0, eta).map_err(err)?;
    let t = assemble_truncation(&y, k, rho).map_err(err)?;
    let cert = match rho_certificate_at(&y, Some(rho)) {
        Ok(c) => Some(c),
        Err(StabError::EpsilonNonPositive { .. }) => None,
        Err(e) => return Err(err(e)),
    };
    #[derive(Serialize)]
    struct Out<T, C> {
        truncation: T,
        certificate: Option<C>,
    }
    to_py(
        py,
        &Out {
            truncation: t.summary(),
            certificate: cert,
        },
    )
}

#[pymodule]
pub fn stablab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPolyLoss>()?;
    m.add_class::<PyLossEnsemble>()?;
    m.add_function(wrap_pyfunction!(analyze_minimum, m)?)?;
    m.add_function(wrap_pyfunction!(run_gd, m)?)?;
    m.add_function(wrap_pyfunction!(bifurcation, m)?)?;
    m.add_function(wrap_pyfunction!(sgd_thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(expected_distance, m)?)?;
    m.add_function(wrap_pyfunction!(moment_operator, m)?)?;
    Ok(())
}
