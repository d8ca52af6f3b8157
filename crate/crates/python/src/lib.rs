use std::path::Path;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use survtopic::corpus::load_corpus;
use survtopic::evaluate;
use survtopic::model_io::load_model;
use survtopic::predict::{predict_risk, PredictConfig};
use survtopic::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Runs the command-line interface in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    survtopic::cli::run(std::iter::once("survtopic".to_string()).chain(args))
}

/// Held-out hazard ratios for a corpus TSV: list of (patient_id, hazard_ratio, theta).
#[pyfunction]
#[pyo3(signature = (model_dir, corpus, tol = 1e-6, max_iter = 200))]
fn predict(model_dir: &str, corpus: &str, tol: f64, max_iter: usize) -> PyResult<Vec<(String, f64, Vec<f64>)>> {
    let model = load_model(Path::new(model_dir)).map_err(to_py)?;
    let corpus = load_corpus(Path::new(corpus), &model.vocabularies).map_err(to_py)?;
    let preds = predict_risk(&model, &corpus, None, &PredictConfig { tol, max_iter }).map_err(to_py)?;
    Ok(preds.into_iter().map(|p| (p.patient_id, p.hazard_ratio, p.topics.theta)).collect())
}

/// Cumulative/dynamic AUC at time t; None when no case or no control exists.
#[pyfunction]
#[pyo3(signature = (times, hazard_ratios, t, tie_half = false))]
fn dynamic_auc(times: Vec<f64>, hazard_ratios: Vec<f64>, t: f64, tie_half: bool) -> PyResult<Option<f64>> {
    if times.len() != hazard_ratios.len() {
        return Err(PyValueError::new_err("times and hazard_ratios differ in length"));
    }
    Ok(evaluate::dynamic_auc(&times, &hazard_ratios, t, tie_half))
}

/// AUC over a grid: (per-point AUC or None, mean AUC over defined points).
#[pyfunction]
#[pyo3(signature = (times, hazard_ratios, grid, tie_half = false))]
fn dynamic_auc_curve(times: Vec<f64>, hazard_ratios: Vec<f64>, grid: Vec<f64>, tie_half: bool) -> PyResult<(Vec<Option<f64>>, f64)> {
    let c = evaluate::dynamic_auc_curve(&times, &hazard_ratios, &grid, tie_half).map_err(to_py)?;
    Ok((c.auc_at_t, c.mean_auc))
}

/// Kaplan–Meier estimate: (event times, survival after each time).
#[pyfunction]
fn kaplan_meier(times: Vec<f64>, events: Vec<bool>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let km = evaluate::kaplan_meier(&times, &events).map_err(to_py)?;
    Ok((km.times, km.survival))
}

#[pyfunction]
fn log_rank_test<'py>(
    py: Python<'py>,
    times_a: Vec<f64>,
    events_a: Vec<bool>,
    times_b: Vec<f64>,
    events_b: Vec<bool>,
) -> PyResult<Bound<'py, PyDict>> {
    let r = evaluate::log_rank_test(&times_a, &events_a, &times_b, &events_b).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("chi_square", r.chi_square)?;
    d.set_item("df", r.df)?;
    d.set_item("p_value", r.p_value)?;
    d.set_item("p_value_one_sided", r.p_value_one_sided)?;
    d.set_item("observed_a", r.observed_a)?;
    d.set_item("expected_a", r.expected_a)?;
    d.set_item("variance", r.variance)?;
    Ok(d)
}

#[pymodule]
fn survtopic_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(dynamic_auc, m)?)?;
    m.add_function(wrap_pyfunction!(dynamic_auc_curve, m)?)?;
    m.add_function(wrap_pyfunction!(kaplan_meier, m)?)?;
    m.add_function(wrap_pyfunction!(log_rank_test, m)?)?;
    Ok(())
}
