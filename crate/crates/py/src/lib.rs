//! Python bindings. Matrices cross the boundary as lists of rows.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use svito::factor::FactorState;
use svito::harness::{run_sim_study, StudyConfig};
use svito::linalg::{self, Matrix};
use svito::portfolio::{min_variance as mv, PortfolioProblem};
use svito::predict::{poet_idio, sv_poet as predict_sv_poet, PoetConfig};
use svito::realized::{prvm_day, psd_project as project, DailyVolMatrix, DayTicks};
use svito::sim::{derive_beta as beta_map, simulate as run_simulation, SimConfig};
use svito::svmodel::{lse_fit as lse, qmle_fit as qmle, QmleOptions, SVParamsJson};

type Rows = Vec<Vec<f64>>;

fn err(e: svito::Error) -> PyErr {
    match e {
        svito::Error::Io(_) | svito::Error::StudyAborted { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn mat(rows: &Rows) -> PyResult<Matrix> {
    linalg::from_rows(rows).ok_or_else(|| PyValueError::new_err("ragged or empty matrix"))
}

fn mats(list: &[Rows]) -> PyResult<Vec<Matrix>> {
    list.iter().map(mat).collect()
}

/// SV-Itô parameters (β₀ and β₁…β_q).
#[pyclass(name = "SVParams", from_py_object)]
#[derive(Clone)]
struct PySVParams {
    inner: svito::svmodel::SVParams,
}

#[pymethods]
impl PySVParams {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let j: SVParamsJson = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner: j.try_into().map_err(err)? })
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SVParamsJson::from(&self.inner)).expect("params serialize")
    }

    #[getter]
    fn r(&self) -> usize {
        self.inner.r
    }
    #[getter]
    fn q(&self) -> usize {
        self.inner.q
    }
    #[getter]
    fn beta0(&self) -> Vec<f64> {
        self.inner.beta0.iter().copied().collect()
    }
    #[getter]
    fn betas(&self) -> Vec<Rows> {
        self.inner.betas.iter().map(linalg::to_rows).collect()
    }
    fn is_stationary(&self) -> bool {
        self.inner.is_stationary()
    }
    fn max_abs_diff(&self, other: &PySVParams) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }
    fn __repr__(&self) -> String {
        format!("SVParams(r={}, q={})", self.inner.r, self.inner.q)
    }
}

/// Maps the continuous-time parameters to the daily recursion.
#[pyfunction]
fn derive_beta(alpha0: Rows, alpha: Vec<Rows>, nu: Rows) -> PyResult<PySVParams> {
    Ok(PySVParams { inner: beta_map(&mat(&alpha0)?, &mats(&alpha)?, &mat(&nu)?).map_err(err)? })
}

/// Runs a simulation from a JSON config; returns the daily true
/// integrated volatilities, factor volatilities and the true parameters.
#[pyfunction]
fn simulate(py: Python<'_>, config_json: &str) -> PyResult<(Vec<Rows>, Vec<Rows>, PySVParams)> {
    let cfg: SimConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let out = py.detach(|| run_simulation(&cfg)).map_err(err)?;
    Ok((
        out.true_gamma.iter().map(linalg::to_rows).collect(),
        out.true_psi.iter().map(linalg::to_rows).collect(),
        PySVParams { inner: out.theta },
    ))
}

/// Pre-averaged realized volatility matrix of one synchronous day
/// (`prices` is ticks × assets).
#[pyfunction]
#[pyo3(signature = (times, prices, window_theta = 1.0))]
fn prvm(times: Vec<f64>, prices: Rows, window_theta: f64) -> PyResult<Rows> {
    let ticks = DayTicks::Sync { times, prices: mat(&prices)? };
    Ok(linalg::to_rows(&prvm_day(&ticks, 1, window_theta).map_err(err)?.matrix))
}

#[pyfunction]
fn psd_project(matrix: Rows) -> PyResult<Rows> {
    let v = DailyVolMatrix { day: 1, matrix: mat(&matrix)?, psd_projected: false };
    Ok(linalg::to_rows(&project(&v).matrix))
}

/// Loading estimate and factor volatilities for rank `r`.
#[pyfunction]
fn estimate_factors(gammas: Vec<Rows>, r: usize) -> PyResult<(Rows, Vec<Rows>)> {
    let s = FactorState::estimate(&mats(&gammas)?, r).map_err(err)?;
    Ok((linalg::to_rows(&s.loading), s.psi_hat.iter().map(linalg::to_rows).collect()))
}

#[pyfunction]
#[pyo3(signature = (psi, q = 1))]
fn lse_fit(psi: Vec<Rows>, q: usize) -> PyResult<PySVParams> {
    Ok(PySVParams { inner: lse(&mats(&psi)?, q).map_err(err)?.theta })
}

#[pyfunction]
#[pyo3(signature = (psi, init = None, q = 1))]
fn qmle_fit(py: Python<'_>, psi: Vec<Rows>, init: Option<PySVParams>, q: usize) -> PyResult<PySVParams> {
    let psi = mats(&psi)?;
    py.detach(|| {
        let start = match init {
            Some(p) => p.inner,
            None => lse(&psi, q)?.theta,
        };
        qmle(&psi, &start, &QmleOptions::default())
    })
    .map(|f| PySVParams { inner: f.theta })
    .map_err(err)
}

/// One-day-ahead SV-POET prediction from daily matrices.
#[pyfunction]
#[pyo3(signature = (gammas, params, omega, project = false))]
fn sv_poet(gammas: Vec<Rows>, params: &PySVParams, omega: f64, project: bool) -> PyResult<Rows> {
    let gs = mats(&gammas)?;
    let theta = &params.inner;
    let state = FactorState::estimate(&gs, theta.r).map_err(err)?;
    let idio = poet_idio(&svito::factor::mean_matrix(&gs), &PoetConfig::adaptive(theta.r, omega)).map_err(err)?;
    Ok(linalg::to_rows(&predict_sv_poet(&state, theta, &idio, project).map_err(err)?.total))
}

/// Minimum-variance weights and variance under ‖w‖₁ ≤ c0.
#[pyfunction]
#[pyo3(signature = (sigma, c0 = 1.0))]
fn min_variance(sigma: Rows, c0: f64) -> PyResult<(Vec<f64>, f64)> {
    let res = mv(&PortfolioProblem::new(mat(&sigma)?, c0)).map_err(err)?;
    Ok((res.weights.iter().copied().collect(), res.objective))
}

/// Runs a simulation study from a JSON config and returns the path of
/// the aggregated results CSV.
#[pyfunction]
fn run_simulation_study(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg: StudyConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.detach(|| run_sim_study(&cfg, None)).map_err(err)?;
    Ok(cfg.output_dir.join("sim_results.csv").display().to_string())
}

#[pymodule]
fn svito_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySVParams>()?;
    m.add_function(wrap_pyfunction!(derive_beta, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(prvm, m)?)?;
    m.add_function(wrap_pyfunction!(psd_project, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_factors, m)?)?;
    m.add_function(wrap_pyfunction!(lse_fit, m)?)?;
    m.add_function(wrap_pyfunction!(qmle_fit, m)?)?;
    m.add_function(wrap_pyfunction!(sv_poet, m)?)?;
    m.add_function(wrap_pyfunction!(min_variance, m)?)?;
    m.add_function(wrap_pyfunction!(run_simulation_study, m)?)?;
    Ok(())
}
