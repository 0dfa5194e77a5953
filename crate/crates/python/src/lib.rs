//! Python bindings. Matrices cross the boundary as nested sequences of
//! floats (lists or numpy arrays), row-major.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::vcmm as core;
use core::io::load_dataset;
use core::simulate::{self, AnovaDesign, GeneticDesign, GeneticSetting, Simulated};
use core::{FitConfig, Formulation, ModelParams, VcmmError};
use nalgebra::{DMatrix, DVector};

fn vector(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}

fn matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some((k, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(format!("row {k} has {} entries, expected {ncols}", r.len()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

fn to_py(e: VcmmError) -> PyErr {
    match e {
        VcmmError::Io { .. } => PyIOError::new_err(e.to_string()),
        VcmmError::Domain(_)
        | VcmmError::Parse { .. }
        | VcmmError::RankDeficient { .. }
        | VcmmError::SingularParameter { .. }
        | VcmmError::DegenerateBlock { .. }
        | VcmmError::UnsupportedDimension(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn parse_formulation(name: &str) -> PyResult<Formulation> {
    name.parse().map_err(to_py)
}

/// Response, fixed-effect design and random-effect design blocks.
#[pyclass(name = "ProblemData", module = "vcmm", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyProblemData {
    inner: core::ProblemData,
}

#[pymethods]
impl PyProblemData {
    /// `y`: 0/1 responses; `x`: n rows of p covariates (p may be 0);
    /// `z_blocks`: one n-row matrix per variance component.
    #[new]
    fn new(y: Vec<f64>, x: Vec<Vec<f64>>, z_blocks: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        let n = y.len();
        let x = matrix(&x).map_err(PyValueError::new_err)?;
        let x = if x.nrows() == 0 { DMatrix::zeros(n, 0) } else { x };
        let blocks = z_blocks
            .iter()
            .enumerate()
            .map(|(i, b)| matrix(b).map_err(|e| PyValueError::new_err(format!("block {i}: {e}"))))
            .collect::<PyResult<Vec<_>>>()?;
        let inner = core::ProblemData::new(vector(y), x, blocks).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Read the `y.csv`, `X.csv`, `Z.csv`, `blocks.json` file set.
    #[staticmethod]
    fn load(y: PathBuf, x: PathBuf, z: PathBuf, blocks: PathBuf) -> PyResult<Self> {
        let ds = load_dataset(&y, &x, &z, &blocks).map_err(to_py)?;
        Ok(Self { inner: ds.data })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn q(&self) -> usize {
        self.inner.q()
    }

    #[getter]
    fn block_sizes(&self) -> Vec<usize> {
        self.inner.block_sizes()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y().iter().copied().collect()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        rows(self.inner.x())
    }

    fn __repr__(&self) -> String {
        format!(
            "ProblemData(n={}, p={}, m={}, block_sizes={:?})",
            self.inner.n(),
            self.inner.p(),
            self.inner.m(),
            self.inner.block_sizes()
        )
    }
}

#[pyclass(name = "FitResult", module = "vcmm", frozen)]
struct PyFitResult {
    inner: core::FitResult,
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.params.beta.iter().copied().collect()
    }

    #[getter]
    fn sigma2(&self) -> Vec<f64> {
        self.inner.params.sigma2.iter().copied().collect()
    }

    /// Laplace-approximated log-likelihood at the estimates.
    #[getter]
    fn loglik_la(&self) -> f64 {
        self.inner.loglik_la
    }

    /// Penalized objective (equal to `loglik_la` when `lambda == 0`).
    #[getter]
    fn objective(&self) -> f64 {
        self.inner.objective()
    }

    #[getter]
    fn objective_trace(&self) -> Vec<f64> {
        self.inner.objective_trace.clone()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn outer_iters(&self) -> usize {
        self.inner.outer_iters
    }

    #[getter]
    fn algorithm(&self) -> &'static str {
        self.inner.formulation.algorithm_name()
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.lambda
    }

    /// Conditional mode of the random effects at the estimates.
    #[getter]
    fn u(&self) -> Vec<f64> {
        self.inner.state.u.iter().copied().collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "FitResult(algorithm={:?}, converged={}, beta={:?}, sigma2={:?}, loglik_la={})",
            self.algorithm(),
            self.inner.converged,
            self.beta(),
            self.sigma2(),
            self.inner.loglik_la
        )
    }
}

#[pyclass(name = "RegPath", module = "vcmm", frozen)]
struct PyRegPath {
    inner: core::RegPath,
}

fn criterion(name: &str) -> PyResult<core::Criterion> {
    match name.to_ascii_lowercase().as_str() {
        "aic" => Ok(core::Criterion::Aic),
        "bic" => Ok(core::Criterion::Bic),
        _ => Err(PyValueError::new_err(format!("criterion must be 'aic' or 'bic', got {name:?}"))),
    }
}

#[pymethods]
impl PyRegPath {
    #[getter]
    fn lambdas(&self) -> Vec<f64> {
        self.inner.lambdas.clone()
    }

    #[getter]
    fn df(&self) -> Vec<usize> {
        self.inner.df.clone()
    }

    #[getter]
    fn aic(&self) -> Vec<f64> {
        self.inner.aic.clone()
    }

    #[getter]
    fn bic(&self) -> Vec<f64> {
        self.inner.bic.clone()
    }

    #[getter]
    fn loglik_la(&self) -> Vec<f64> {
        self.inner.loglik_la()
    }

    /// Fitted variance components, one row per lambda.
    #[getter]
    fn sigma2(&self) -> Vec<Vec<f64>> {
        self.inner
            .fits
            .iter()
            .map(|f| f.params.sigma2.iter().copied().collect())
            .collect()
    }

    /// Index of the lambda chosen by `"aic"` or `"bic"`.
    fn selected(&self, criterion_name: &str) -> PyResult<usize> {
        Ok(self.inner.selected(criterion(criterion_name)?))
    }

    /// Blocks with nonzero variance at the selected lambda.
    fn selected_support(&self, criterion_name: &str) -> PyResult<Vec<usize>> {
        Ok(self.inner.selected_support(criterion(criterion_name)?))
    }

    fn fit(&self, index: usize) -> PyResult<PyFitResult> {
        self.inner
            .fits
            .get(index)
            .map(|f| PyFitResult { inner: f.clone() })
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))
    }

    fn __len__(&self) -> usize {
        self.inner.lambdas.len()
    }
}

fn config(
    max_outer_iters: usize,
    outer_tol: f64,
    inner_tol: f64,
    init_sigma2: Option<Vec<f64>>,
) -> FitConfig {
    FitConfig {
        max_outer_iters,
        outer_tol,
        inner_tol,
        init_sigma2,
        ..FitConfig::default()
    }
}

/// Maximize the Laplace log-likelihood with MMLA1 (`"mmla1"`) or MMLA2 (`"mmla2"`).
#[pyfunction]
#[pyo3(signature = (data, formulation = "mmla1", max_outer_iters = 500, outer_tol = 1e-8, inner_tol = 1e-6, init_sigma2 = None))]
fn fit(
    py: Python<'_>,
    data: &PyProblemData,
    formulation: &str,
    max_outer_iters: usize,
    outer_tol: f64,
    inner_tol: f64,
    init_sigma2: Option<Vec<f64>>,
) -> PyResult<PyFitResult> {
    let form = parse_formulation(formulation)?;
    let cfg = config(max_outer_iters, outer_tol, inner_tol, init_sigma2);
    let inner = py
        .detach(|| core::fit(form, &data.inner, &cfg))
        .map_err(to_py)?;
    Ok(PyFitResult { inner })
}

/// Fit the lasso-penalized objective `L_LA - lam * sum(sigma)` at one penalty level.
#[pyfunction]
#[pyo3(signature = (data, lam, max_outer_iters = 500, outer_tol = 1e-8, inner_tol = 1e-6))]
fn fit_penalized(
    py: Python<'_>,
    data: &PyProblemData,
    lam: f64,
    max_outer_iters: usize,
    outer_tol: f64,
    inner_tol: f64,
) -> PyResult<PyFitResult> {
    let cfg = config(max_outer_iters, outer_tol, inner_tol, None);
    let inner = py
        .detach(|| core::fit_penalized(&data.inner, lam, &cfg))
        .map_err(to_py)?;
    Ok(PyFitResult { inner })
}

/// Smallest penalty at which every variance component is zero after one step
/// from the default start.
#[pyfunction]
fn lambda_max(data: &PyProblemData) -> PyResult<f64> {
    core::lambda_max(&data.inner, &FitConfig::default()).map_err(to_py)
}

/// Fit a decreasing lambda grid (default: 50 log-spaced points down to
/// `ratio * lambda_max`) and score each fit by AIC and BIC.
#[pyfunction]
#[pyo3(signature = (data, lambdas = None, points = 50, ratio = 1e-3, warm_start = true, max_outer_iters = 500, outer_tol = 1e-8))]
#[allow(clippy::too_many_arguments)]
fn compute_path(
    py: Python<'_>,
    data: &PyProblemData,
    lambdas: Option<Vec<f64>>,
    points: usize,
    ratio: f64,
    warm_start: bool,
    max_outer_iters: usize,
    outer_tol: f64,
) -> PyResult<PyRegPath> {
    let cfg = config(max_outer_iters, outer_tol, 1e-6, None);
    let grid = match lambdas {
        Some(l) => l,
        None => core::default_lambda_grid(&data.inner, &cfg, points, ratio).map_err(to_py)?,
    };
    let opts = core::PathOptions { warm_start };
    let inner = py
        .detach(|| core::compute_path_with(&data.inner, &grid, &cfg, &opts))
        .map_err(to_py)?;
    Ok(PyRegPath { inner })
}

/// `L_LA(beta, sigma2)` with the random effects at their conditional mode.
#[pyfunction]
#[pyo3(signature = (data, beta, sigma2, formulation = "mmla2"))]
fn laplace_loglik(data: &PyProblemData, beta: Vec<f64>, sigma2: Vec<f64>, formulation: &str) -> PyResult<f64> {
    let form = parse_formulation(formulation)?;
    let params = ModelParams::new(vector(beta), vector(sigma2)).map_err(to_py)?;
    let state = core::solve_u(form, &params, &data.inner, None, &FitConfig::default()).map_err(to_py)?;
    core::laplace_loglik(form, &state, &params, &data.inner).map_err(to_py)
}

#[pyfunction]
fn soft_threshold(z: f64, gamma: f64) -> PyResult<f64> {
    if !(gamma >= 0.0) {
        return Err(PyValueError::new_err("gamma must be nonnegative"));
    }
    Ok(core::soft_threshold(z, gamma))
}

fn simulated<'py>(py: Python<'py>, sim: Simulated) -> PyResult<(PyProblemData, Bound<'py, PyDict>)> {
    let truth = PyDict::new(py);
    truth.set_item("beta", sim.truth.beta.iter().copied().collect::<Vec<_>>())?;
    truth.set_item("sigma2", sim.truth.sigma2.iter().copied().collect::<Vec<_>>())?;
    truth.set_item("x_names", sim.x_names)?;
    truth.set_item("block_names", sim.block_names)?;
    Ok((PyProblemData { inner: sim.data }, truth))
}

/// Crossed two-factor design with interaction; returns `(data, truth)`.
#[pyfunction]
#[pyo3(signature = (c, seed, a = 5, b = 5))]
fn simulate_anova(py: Python<'_>, c: usize, seed: u64, a: usize, b: usize) -> PyResult<(PyProblemData, Bound<'_, PyDict>)> {
    let design = AnovaDesign {
        a,
        b,
        ..AnovaDesign::standard(c, seed)
    };
    simulated(py, simulate::simulate_anova(&design).map_err(to_py)?)
}

/// Genetic design for setting 1-4 with `m` regions; returns `(data, truth)`.
#[pyfunction]
#[pyo3(signature = (setting, m, seed, n = 399))]
fn simulate_genetic(py: Python<'_>, setting: u8, m: usize, seed: u64, n: usize) -> PyResult<(PyProblemData, Bound<'_, PyDict>)> {
    let s = GeneticSetting::from_index(setting).map_err(to_py)?;
    let design = GeneticDesign {
        n,
        ..GeneticDesign::setting(s, m, seed).map_err(to_py)?
    };
    simulated(py, simulate::simulate_genetic(&design).map_err(to_py)?)
}

/// TP, FP, Exact and Over averaged over replicates.
#[pyfunction]
fn selection_metrics<'py>(
    py: Python<'py>,
    truth: Vec<usize>,
    fitted: Vec<Vec<usize>>,
) -> PyResult<Bound<'py, PyDict>> {
    let truth: BTreeSet<usize> = truth.into_iter().collect();
    let fitted: Vec<BTreeSet<usize>> = fitted.into_iter().map(|f| f.into_iter().collect()).collect();
    let m = simulate::selection_metrics(&truth, &fitted);
    let out = PyDict::new(py);
    out.set_item("true_positive", m.true_positive)?;
    out.set_item("false_positive", m.false_positive)?;
    out.set_item("exact", m.exact)?;
    out.set_item("over", m.over)?;
    Ok(out)
}

#[pymodule]
#[pyo3(name = "vcmm")]
fn vcmm_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblemData>()?;
    m.add_class::<PyFitResult>()?;
    m.add_class::<PyRegPath>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(fit_penalized, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_max, m)?)?;
    m.add_function(wrap_pyfunction!(compute_path, m)?)?;
    m.add_function(wrap_pyfunction!(laplace_loglik, m)?)?;
    m.add_function(wrap_pyfunction!(soft_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_anova, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_genetic, m)?)?;
    m.add_function(wrap_pyfunction!(selection_metrics, m)?)?;
    Ok(())
}
