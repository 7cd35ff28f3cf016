//! Python bindings: built-in families and observables by name, results as
//! plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use srblab::analysis;
use srblab::cli::{self, ExperimentConfig, RunError};
use srblab::dynamics;
use srblab::observables::make_builtin_observable;
use srblab::rates;
use srblab::response::{self, EstimatorParams, ResponseCurve};
use srblab::transfer::{build_ulam, srb_ulam, Mesh};
use srblab::{make_builtin_family, Error, Params};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Unknown { .. } | Error::InvalidParameter { .. } | Error::Config { .. } | Error::DimensionMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<PyObject> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn point(x: &[f64]) -> PyResult<[f64; 3]> {
    if x.len() > 3 {
        return Err(PyValueError::new_err("points have at most 3 coordinates"));
    }
    let mut p = [0.0; 3];
    p[..x.len()].copy_from_slice(x);
    Ok(p)
}

/// Families, observables and experiments with their parameters.
#[pyfunction]
fn list_builtins() -> String {
    cli::list_builtins()
}

/// Orbit of `f_t` after `burn_in` steps, one row per point.
#[pyfunction]
#[pyo3(signature = (family, t, n_steps, params = Params::new(), x0 = None, burn_in = 0, seed = 0))]
fn orbit(
    family: &str,
    t: f64,
    n_steps: usize,
    params: Params,
    x0: Option<Vec<f64>>,
    burn_in: usize,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let fam = make_builtin_family(family, &params).map_err(to_py_err)?;
    let start = x0.as_deref().map(point).transpose()?;
    let pts = dynamics::orbit(fam.as_ref(), t, start, n_steps, burn_in, seed).map_err(to_py_err)?;
    let d = fam.dim();
    Ok(pts.iter().map(|p| p[..d].to_vec()).collect())
}

/// Finite-time hyperbolicity rates `nu_s`, `nu_s_bar`, `nu_u`, `J`.
#[pyfunction]
#[pyo3(signature = (family, t, params = Params::new(), m = 20, n_samples = 16, seed = 0))]
fn finite_time_rates(py: Python<'_>, family: &str, t: f64, params: Params, m: usize, n_samples: usize, seed: u64) -> PyResult<PyObject> {
    let fam = make_builtin_family(family, &params).map_err(to_py_err)?;
    let r = rates::finite_time_rates(fam.as_ref(), t, m, n_samples, seed).map_err(to_py_err)?;
    to_py(py, &r)
}

/// Ulam SRB density on a mesh with `cells` per axis, first axis fastest.
#[pyfunction]
#[pyo3(signature = (family, t, cells, params = Params::new(), samples_per_cell = 64, seed = 0))]
fn srb_density(family: &str, t: f64, cells: Vec<usize>, params: Params, samples_per_cell: usize, seed: u64) -> PyResult<Vec<f64>> {
    let fam = make_builtin_family(family, &params).map_err(to_py_err)?;
    let mesh = Mesh::new(fam.domain().clone(), &cells).map_err(to_py_err)?;
    let op = build_ulam(fam.as_ref(), t, &mesh, samples_per_cell, seed).map_err(to_py_err)?;
    let rho = srb_ulam(&op, 1e-13, 100_000).map_err(to_py_err)?;
    rho.density().map_err(to_py_err)
}

/// `R(t) = ∫ θ dρ_t` over `t_values`. `estimator` is a dict such as
/// `{"estimator": "ulam", "cells": [1024], "samples_per_cell": 64, "seed": 0,
/// "tol": 1e-13, "max_iter": 100000}` or `{"estimator": "birkhoff", ...}`.
#[pyfunction]
#[pyo3(signature = (family, observable, t_values, estimator, family_params = Params::new(), observable_params = Params::new()))]
fn response_curve(
    py: Python<'_>,
    family: &str,
    observable: &str,
    t_values: Vec<f64>,
    estimator: &Bound<'_, PyAny>,
    family_params: Params,
    observable_params: Params,
) -> PyResult<PyObject> {
    let text: String = py.import("json")?.call_method1("dumps", (estimator,))?.extract()?;
    let est: EstimatorParams = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("estimator: {e}")))?;
    let fam = make_builtin_family(family, &family_params).map_err(to_py_err)?;
    let obs = make_builtin_observable(observable, &observable_params, fam.domain()).map_err(to_py_err)?;
    let curve = response::response_curve(fam.as_ref(), &obs, &t_values, &est).map_err(to_py_err)?;
    to_py(py, &curve)
}

/// Hölder exponent of `|R(t) - R(t0)|` from tabulated values.
#[pyfunction]
#[pyo3(signature = (t_values, r_values, error_bars, t0 = 0.0, scale_decades = 3))]
fn holder_fit(py: Python<'_>, t_values: Vec<f64>, r_values: Vec<f64>, error_bars: Vec<f64>, t0: f64, scale_decades: u32) -> PyResult<PyObject> {
    let curve = ResponseCurve::tabulated(&t_values, &r_values, &error_bars).map_err(to_py_err)?;
    let fit = analysis::holder_fit(&curve, t0, scale_decades).map_err(to_py_err)?;
    to_py(py, &fit)
}

/// Runs a TOML experiment config and returns the `results.json` payload.
#[pyfunction]
#[pyo3(signature = (config, seed = None, out = None))]
fn run_experiment(py: Python<'_>, config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> PyResult<PyObject> {
    let cfg = ExperimentConfig::load(&config).map_err(to_py_err)?;
    let outcome = py
        .allow_threads(|| cli::run(&cfg, seed, out.as_deref()))
        .map_err(|e| match e {
            RunError::Validation(e) => PyValueError::new_err(e.to_string()),
            RunError::Computation(e) => PyRuntimeError::new_err(e.to_string()),
        })?;
    to_py(py, &outcome.results)
}

#[pymodule]
pub fn srblab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(list_builtins, m)?)?;
    m.add_function(wrap_pyfunction!(orbit, m)?)?;
    m.add_function(wrap_pyfunction!(finite_time_rates, m)?)?;
    m.add_function(wrap_pyfunction!(srb_density, m)?)?;
    m.add_function(wrap_pyfunction!(response_curve, m)?)?;
    m.add_function(wrap_pyfunction!(holder_fit, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
