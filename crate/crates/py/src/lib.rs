//! Python module `catos`: run, archive and analyze sessions from Python.
//!
//! Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use catos_core::analytics::{self, AnalyticsError};
use catos_core::archive::{self, ArchiveError};
use catos_core::session::{self, RunConfig, SessionError};

fn session_err(e: SessionError) -> PyErr {
    match e {
        SessionError::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn archive_err(e: ArchiveError) -> PyErr {
    match e {
        ArchiveError::Io { .. } | ArchiveError::MissingFile(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn analytics_err(e: AnalyticsError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Serializes through JSON so Python gets ordinary dicts.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Parses a run configuration (JSON text), optionally overriding the seed,
/// and returns the validated config as a dict.
#[pyfunction]
#[pyo3(signature = (config_json, seed=None))]
fn load_config<'py>(py: Python<'py>, config_json: &str, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = parse_config(config_json, seed)?;
    to_py(py, &cfg)
}

fn parse_config(config_json: &str, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut v: serde_json::Value =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(format!("config: {e}")))?;
    if let (Some(s), Some(obj)) = (seed, v.as_object_mut()) {
        obj.insert("seed".into(), s.into());
    }
    RunConfig::from_json(&v.to_string()).map_err(session_err)
}

/// Runs a whole simulated session into `out_dir` and returns its report.
#[pyfunction]
#[pyo3(signature = (config_json, out_dir, seed=None))]
fn run_session<'py>(
    py: Python<'py>,
    config_json: &str,
    out_dir: PathBuf,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = parse_config(config_json, seed)?;
    let report = py.detach(|| session::run_session(&cfg, &out_dir)).map_err(session_err)?;
    to_py(py, &report)
}

/// Moves a finished session into `archive_root` and returns its index.
#[pyfunction]
#[pyo3(signature = (out_dir, archive_root, session_id=None))]
fn archive_session<'py>(
    py: Python<'py>,
    out_dir: PathBuf,
    archive_root: PathBuf,
    session_id: Option<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let index = py
        .detach(|| archive::archive_session(&out_dir, &archive_root, session_id.as_deref()))
        .map_err(archive_err)?;
    to_py(py, &index)
}

#[pyfunction]
fn list_sessions(archive_root: PathBuf) -> PyResult<Vec<String>> {
    archive::list_sessions(&archive_root).map_err(archive_err)
}

#[pyfunction]
fn session_stats<'py>(py: Python<'py>, session_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let stats = analytics::session_stats(&session_dir).map_err(analytics_err)?;
    to_py(py, &stats)
}

#[pyfunction]
fn performance_series<'py>(py: Python<'py>, archive_root: PathBuf, ids: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let series = analytics::performance_series(&archive_root, &ids).map_err(analytics_err)?;
    to_py(py, &series)
}

/// One-sided exact binomial tail `P[X >= k]`.
#[pyfunction]
#[pyo3(signature = (n, k, p0=analytics::CHANCE))]
fn binomial_pvalue(n: u64, k: u64, p0: f64) -> PyResult<f64> {
    analytics::binomial_pvalue(n, k, p0).map_err(analytics_err)
}

#[pyfunction]
fn duty_cycle(recorded_s: f64, observed_s: f64) -> PyResult<f64> {
    analytics::duty_cycle(recorded_s, observed_s).map_err(analytics_err)
}

#[pyfunction]
fn frames_to_seconds(frame_count: u64, fps: f64) -> PyResult<f64> {
    analytics::frames_to_seconds(frame_count, fps).map_err(analytics_err)
}

#[pymodule]
fn catos(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_session, m)?)?;
    m.add_function(wrap_pyfunction!(archive_session, m)?)?;
    m.add_function(wrap_pyfunction!(list_sessions, m)?)?;
    m.add_function(wrap_pyfunction!(session_stats, m)?)?;
    m.add_function(wrap_pyfunction!(performance_series, m)?)?;
    m.add_function(wrap_pyfunction!(binomial_pvalue, m)?)?;
    m.add_function(wrap_pyfunction!(duty_cycle, m)?)?;
    m.add_function(wrap_pyfunction!(frames_to_seconds, m)?)?;
    m.add("CHANCE", analytics::CHANCE)?;
    Ok(())
}
