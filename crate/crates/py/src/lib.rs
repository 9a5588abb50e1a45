//! Python bindings for `asymoe`.
//!
//! Structured results (reports, evaluations) cross the boundary as JSON and
//! come back as plain dicts.

use std::path::PathBuf;

use asymoe::cli::{grad_check_samples, load_datasets};
use asymoe::config::Config;
use asymoe::gradcheck::{grad_check as run_grad_check, GradCheckOptions};
use asymoe::hyperbolic::{exp_map_origin_clipped, log_map_origin, lorentz_distance, LorentzPoint};
use asymoe::model::{AsyMoeModel, LossWeights};
use asymoe::synth_data::{build_datasets, write_jsonl};
use asymoe::trainer::{evaluate, load_checkpoint, save_checkpoint, train};
use asymoe::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Dimension { .. } | Error::Geometry(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn resolve(config: Option<&str>, overrides: Option<Vec<String>>) -> PyResult<Config> {
    Config::from_toml_with_overrides(config.unwrap_or(""), &overrides.unwrap_or_default()).map_err(py_err)
}

/// Default configuration as TOML text.
#[pyfunction]
fn default_config() -> String {
    Config::default().to_toml()
}

/// Writes the synthetic splits for a config into `out_dir` and returns their paths.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None, overrides=None))]
fn generate_data(out_dir: PathBuf, config: Option<&str>, overrides: Option<Vec<String>>) -> PyResult<Vec<PathBuf>> {
    let cfg = resolve(config, overrides)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| py_err(e.into()))?;
    let mut paths = Vec::new();
    for d in build_datasets(cfg.seed, &cfg.data).map_err(py_err)? {
        let p = out_dir.join(format!("{}.jsonl", d.header.split));
        write_jsonl(&d, &p).map_err(py_err)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Runs the finite-difference gradient check on a freshly initialised model.
#[pyfunction]
#[pyo3(signature = (config=None, overrides=None))]
fn grad_check<'py>(py: Python<'py>, config: Option<&str>, overrides: Option<Vec<String>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = resolve(config, overrides)?;
    let model = AsyMoeModel::new(&cfg).map_err(py_err)?;
    let mut w = LossWeights::from(&cfg.train);
    w.align = if w.align == 0.0 { 0.1 } else { w.align };
    w.order = if w.order == 0.0 { 0.1 } else { w.order };
    let report = run_grad_check(&model, &grad_check_samples(&cfg), w, &GradCheckOptions::default()).map_err(py_err)?;
    to_py(py, &report)
}

/// Maps a tangent vector at the origin onto the hyperboloid.
#[pyfunction]
#[pyo3(signature = (v, curvature=1.0, max_norm=f64::INFINITY))]
fn exp_map_origin(v: Vec<f64>, curvature: f64, max_norm: f64) -> PyResult<Vec<f64>> {
    Ok(exp_map_origin_clipped(&v, curvature, max_norm).map_err(py_err)?.coords().to_vec())
}

/// Inverse of `exp_map_origin`; takes full hyperboloid coordinates.
#[pyfunction]
#[pyo3(signature = (x, curvature=1.0))]
fn log_map_origin_py(x: Vec<f64>, curvature: f64) -> PyResult<Vec<f64>> {
    let p = LorentzPoint::new(x, curvature).map_err(py_err)?;
    log_map_origin(&p).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (x, y, curvature=1.0))]
fn distance(x: Vec<f64>, y: Vec<f64>, curvature: f64) -> PyResult<f64> {
    let a = LorentzPoint::new(x, curvature).map_err(py_err)?;
    let b = LorentzPoint::new(y, curvature).map_err(py_err)?;
    lorentz_distance(&a, &b).map_err(py_err)
}

/// An AsyMoE model plus its configuration.
#[pyclass(name = "Model")]
struct PyModel {
    inner: AsyMoeModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config=None, overrides=None))]
    fn new(config: Option<&str>, overrides: Option<Vec<String>>) -> PyResult<Self> {
        let cfg = resolve(config, overrides)?;
        Ok(Self { inner: AsyMoeModel::new(&cfg).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_checkpoint(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    #[getter]
    fn config(&self) -> String {
        self.inner.config.to_toml()
    }

    /// Current evidence-expert mixing weights by parameter name.
    fn alphas(&self) -> Vec<(String, f64)> {
        self.inner.alphas()
    }

    /// Trains on data generated from the model's config and returns the report.
    #[pyo3(signature = (out_dir=None))]
    fn train<'py>(&mut self, py: Python<'py>, out_dir: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
        let cfg = &self.inner.config;
        let mut splits = build_datasets(cfg.seed, &cfg.data).map_err(py_err)?.into_iter();
        let train_set = splits.next().ok_or_else(|| PyRuntimeError::new_err("no train split"))?.to_multimodal();
        let evals: Vec<_> = splits.map(|d| (d.header.split.clone(), d)).collect();
        let report = train(&mut self.inner, &train_set, &evals, out_dir.as_deref()).map_err(py_err)?;
        to_py(py, &report)
    }

    /// Evaluates on a JSONL file or a directory of them, keyed by split.
    fn evaluate<'py>(&self, py: Python<'py>, data: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let mut out = std::collections::BTreeMap::new();
        for d in load_datasets(&data).map_err(py_err)? {
            out.insert(d.header.split.clone(), evaluate(&self.inner, &d).map_err(py_err)?);
        }
        to_py(py, &out)
    }

    fn __repr__(&self) -> String {
        let m = &self.inner.config.model;
        format!("Model(d_model={}, n_layers={}, parameters={})", m.d_model, m.n_layers, self.num_parameters())
    }
}

#[pymodule]
#[pyo3(name = "asymoe")]
fn asymoe_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(exp_map_origin, m)?)?;
    m.add("log_map_origin", wrap_pyfunction!(log_map_origin_py, m)?)?;
    m.add_function(wrap_pyfunction!(distance, m)?)?;
    Ok(())
}
