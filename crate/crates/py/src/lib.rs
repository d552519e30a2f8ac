//! Python bindings. Results come back as plain dicts and lists; coefficient
//! indices are 1-based, as on the command line.

use endiv::inference::{self, PipelineConfig};
use endiv::simulation::{self, DgpParams, SimulationConfig};
use endiv::{sensitivity, stage1, Dataset, Error};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn to_py_err(e: Error) -> PyErr {
    match endiv::cli::exit_code(&e) {
        2 => PyValueError::new_err(e.to_string()),
        4 => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_python<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn dataset(y: Vec<f64>, x: Vec<Vec<f64>>, z: Vec<Vec<f64>>) -> PyResult<Dataset> {
    Dataset::from_rows(y, &x, &z).map_err(to_py_err)
}

fn zero_based(set: &[usize], p: usize) -> PyResult<Vec<usize>> {
    set.iter()
        .map(|&j| {
            if j == 0 || j > p {
                Err(PyValueError::new_err(format!("index {j} out of range for p = {p}")))
            } else {
                Ok(j - 1)
            }
        })
        .collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let k = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if k == 0 || p == 0 || rows.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err("matrix must be a nonempty list of equal-length rows"));
    }
    Ok(DMatrix::from_fn(k, p, |i, j| rows[i][j]))
}

fn pipeline(alpha: f64, draws: usize, seed: u64, c: f64, kappa: Option<f64>) -> PipelineConfig {
    PipelineConfig {
        alpha,
        draws,
        seed,
        c,
        kappa_floor: kappa,
        ..PipelineConfig::default()
    }
}

/// Stage-1 estimate `beta_hat` with the default penalties.
#[pyfunction]
#[pyo3(signature = (y, x, z, alpha=0.05, kappa=None))]
fn fit_beta<'py>(
    py: Python<'py>,
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    alpha: f64,
    kappa: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let data = dataset(y, x, z)?;
    let cfg = pipeline(alpha, 0, 0, 1.1, kappa);
    let pen = inference::stage1_penalties(&data, &cfg).map_err(to_py_err)?;
    let fit = py
        .detach(|| stage1::fit_beta_with(&data, &pen, &cfg.solver))
        .map_err(to_py_err)?;
    to_python(py, &fit)
}

/// Debiased estimates and simultaneous bands for the 1-based targets in `set`.
#[pyfunction]
#[pyo3(signature = (y, x, z, set, alpha=0.05, draws=2000, seed=0, c=1.1, kappa=None))]
#[allow(clippy::too_many_arguments)]
fn bands<'py>(
    py: Python<'py>,
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    set: Vec<usize>,
    alpha: f64,
    draws: usize,
    seed: u64,
    c: f64,
    kappa: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let data = dataset(y, x, z)?;
    let targets = zero_based(&set, data.p())?;
    let cfg = pipeline(alpha, draws, seed, c, kappa);
    let res = py
        .detach(|| inference::infer(&data, &targets, &cfg))
        .map_err(to_py_err)?;
    let intervals: Vec<serde_json::Value> = res
        .band
        .entries
        .iter()
        .map(|e| {
            serde_json::json!({
                "j": e.j + 1, "lo": e.interval.lo, "hi": e.interval.hi,
                "beta_check": e.beta_check, "sigma_hat": e.sigma_hat,
            })
        })
        .collect();
    let out = serde_json::json!({
        "S": set,
        "alpha": alpha,
        "critical_value": res.band.critical_value,
        "intervals": intervals,
        "B": draws,
        "seed": seed,
    });
    to_python(py, &out)
}

/// Exact `kappa_q(s, u)` for small matrices; returns `(value, certificate)`.
#[pyfunction]
#[pyo3(signature = (psi, s, u=3.0, q=1))]
fn kappa_exact(psi: Vec<Vec<f64>>, s: usize, u: f64, q: u32) -> PyResult<(f64, String)> {
    let psi = matrix(psi)?;
    let (k, cert) = sensitivity::kappa_exact_small(&psi, s, u, q).map_err(to_py_err)?;
    let cert = serde_json::to_value(cert).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((k, cert.as_str().unwrap_or_default().to_string()))
}

/// Sparse-singular-value lower bound on `kappa_q(s, u)`.
#[pyfunction]
#[pyo3(signature = (psi, s, m_grid, u=3.0, q=1))]
fn kappa_lower_bound(psi: Vec<Vec<f64>>, s: usize, m_grid: Vec<usize>, u: f64, q: u32) -> PyResult<f64> {
    let psi = matrix(psi)?;
    sensitivity::kappa_lower_bound(&psi, s, u, q, &m_grid).map_err(to_py_err)
}

/// One draw of the simulation design as `(y, x, z)` row lists.
#[pyfunction]
#[pyo3(signature = (n, p, l=1, seed=0))]
fn generate(n: usize, p: usize, l: usize, seed: u64) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let params = DgpParams::new(n, p, p * l, l, seed).map_err(to_py_err)?;
    let data = simulation::generate_dgp(&params).map_err(to_py_err)?;
    let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    Ok((data.y().iter().copied().collect(), rows(data.x()), rows(data.z())))
}

/// Monte Carlo summary for the simulation design.
#[pyfunction]
#[pyo3(signature = (n=500, p=30, l=1, reps=100, seed=0, draws=1000, kappa=None))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    n: usize,
    p: usize,
    l: usize,
    reps: usize,
    seed: u64,
    draws: usize,
    kappa: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let params = DgpParams::new(n, p, p * l, l, 0).map_err(to_py_err)?;
    let kappa = kappa.or(Some(simulation::population_kappa(p)));
    let cfg = SimulationConfig::new(p, pipeline(0.05, draws, 0, 1.1, kappa));
    let summary = py
        .detach(|| simulation::monte_carlo(&params, reps, seed, &cfg))
        .map_err(to_py_err)?;
    to_python(py, &summary)
}

/// Estimation and simultaneous inference for high-dimensional IV models.
#[pymodule(name = "endiv")]
mod endiv_module {
    #[pymodule_export]
    use super::{bands, fit_beta, generate, kappa_exact, kappa_lower_bound, simulate};
}
