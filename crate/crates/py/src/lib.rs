use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use faithkit::faithmetrics::{classify_taxonomy, faithfulness_score, FaithScore};
use faithkit::mechinterp::{fit_linear, Attribution, AttributionKind};
use faithkit::pipeline::{load_reports, render_summary, run_pipeline, simulate, ReportBundle, RunConfig, SimulateSpec, SummaryFormat};
use faithkit::steering::{steer_trace, SteeringPlan, TokenScope};
use faithkit::trace::{load_trace, save_trace, ActivationTrace, Circuit};
use faithkit::FaithError;

fn err(e: FaithError) -> PyErr {
    match e {
        FaithError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Per-(token, layer) hidden states of one forward pass.
#[pyclass(name = "Trace", module = "faithkit_py", frozen)]
struct PyTrace {
    inner: ActivationTrace,
}

#[pymethods]
impl PyTrace {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_trace(&path).map(|inner| PyTrace { inner }).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_trace(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    #[getter]
    fn granularity(&self) -> &'static str {
        self.inner.granularity().as_str()
    }

    #[getter]
    fn n_tokens(&self) -> usize {
        self.inner.n_tokens()
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model()
    }

    #[getter]
    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    fn state(&self, token: usize, layer: usize) -> PyResult<Vec<f32>> {
        self.inner.state(token, layer).map(<[f32]>::to_vec).map_err(err)
    }

    fn bit_eq(&self, other: &PyTrace) -> bool {
        self.inner.bit_eq(&other.inner)
    }

    /// Adds `lam * vectors[layer]` at the last token (or every token).
    #[pyo3(signature = (vectors, lam, all_tokens = false))]
    fn steer(&self, vectors: BTreeMap<usize, Vec<f64>>, lam: f64, all_tokens: bool) -> PyResult<PyTrace> {
        let layers: BTreeSet<usize> = vectors.keys().copied().collect();
        let plan = SteeringPlan::new(vectors, lam, layers).map_err(err)?;
        let scope = if all_tokens { TokenScope::AllTokens } else { TokenScope::LastToken };
        steer_trace(&self.inner, &plan, scope).map(|inner| PyTrace { inner }).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Trace(model_id={:?}, n_tokens={}, n_layers={}, d_model={})",
            self.inner.model_id(),
            self.inner.n_tokens(),
            self.inner.n_layers(),
            self.inner.d_model()
        )
    }
}

/// Coordinates as `(token, layer)` pairs from "RS@7:5-11" or "7:5-11".
#[pyfunction]
fn parse_circuit(spec: &str) -> PyResult<Vec<(usize, usize)>> {
    Circuit::parse(spec).map(|c| c.coords().collect()).map_err(err)
}

/// Fraction of invoked concepts found significant; None when nothing is invoked.
#[pyfunction]
fn faithfulness(significant: Vec<bool>) -> Option<f64> {
    let attrs: Vec<Attribution> = significant
        .into_iter()
        .enumerate()
        .map(|(i, s)| Attribution {
            concept_id: format!("c{i}"),
            kind: AttributionKind::Probing,
            score: if s { 1.0 } else { 0.0 },
            significant: s,
        })
        .collect();
    match faithfulness_score(&attrs) {
        FaithScore::Score(v) => Some(v),
        FaithScore::NoConcepts => None,
    }
}

/// OLS of p on lambda with the slope t-test.
#[pyfunction]
fn ols<'py>(py: Python<'py>, points: Vec<(f64, f64)>) -> PyResult<Bound<'py, PyDict>> {
    let r = fit_linear(&points).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("beta0", r.beta0)?;
    d.set_item("beta1", r.beta1)?;
    d.set_item("se_beta1", r.se_beta1)?;
    d.set_item("t", r.t_stat)?;
    d.set_item("p", r.p_value)?;
    d.set_item("n", r.n)?;
    d.set_item("mse", r.mse)?;
    Ok(d)
}

/// "C1".."C10" for the four 2-hop flags.
#[pyfunction]
fn taxonomy(prediction_correct: bool, faithful: bool, self_nle_correct: bool, gold_bridge_detected: bool) -> String {
    classify_taxonomy(prediction_correct, faithful, self_nle_correct, gold_bridge_detected).to_string()
}

/// Runs the pipeline for a JSON config and returns the JSON summary.
#[pyfunction]
fn run(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = RunConfig::from_json(config_json).map_err(err)?;
    py.detach(|| run_pipeline(&cfg).and_then(|b| render_summary(&b, SummaryFormat::Json)))
        .map_err(err)
}

/// Writes a synthetic corpus; returns the number of records.
#[pyfunction]
fn simulate_corpus(py: Python<'_>, spec_json: &str, out_dir: PathBuf) -> PyResult<usize> {
    let spec = SimulateSpec::from_json(spec_json).map_err(err)?;
    py.detach(|| simulate(&spec, &out_dir)).map(|v| v.len()).map_err(err)
}

/// Summary of a reports JSONL in "table", "json" or "csv".
#[pyfunction]
#[pyo3(signature = (reports_path, format = "table", model_id = "model"))]
fn summarize_reports(reports_path: PathBuf, format: &str, model_id: &str) -> PyResult<String> {
    let bundle = ReportBundle {
        model_id: model_id.to_string(),
        reports: load_reports(&reports_path).map_err(err)?,
        ..Default::default()
    };
    render_summary(&bundle, format.parse().map_err(err)?).map_err(err)
}

#[pymodule]
fn faithkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(parse_circuit, m)?)?;
    m.add_function(wrap_pyfunction!(faithfulness, m)?)?;
    m.add_function(wrap_pyfunction!(ols, m)?)?;
    m.add_function(wrap_pyfunction!(taxonomy, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(summarize_reports, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
