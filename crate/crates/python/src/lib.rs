//! Python bindings. Structured inputs and outputs cross the boundary as
//! plain dicts and lists, converted through JSON.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde::de::DeserializeOwned;
use serde::Serialize;

use wbal_core::balance;
use wbal_core::data::{self, Estimand, ParseOptions, Separator};
use wbal_core::example;
use wbal_core::outcome::export_data_and_weights;
use wbal_core::pipeline::{self, AnalysisRequest};
use wbal_core::report::{render_report, ReportContext};
use wbal_core::weights::Algorithm;

create_exception!(wbal, WbalError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    WbalError::new_err(e.to_string())
}

/// Accepts a dict/list or a JSON string.
fn from_py<T: DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = if let Ok(s) = obj.cast::<PyString>() {
        s.to_str()?.to_owned()
    } else {
        py.import("json")?.call_method1("dumps", (obj,))?.extract()?
    };
    serde_json::from_str(&text).map_err(err)
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_estimand(s: &str) -> PyResult<Estimand> {
    serde_json::from_value(serde_json::Value::String(s.to_uppercase())).map_err(err)
}

fn parse_separator(s: &str) -> PyResult<Separator> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase())).map_err(err)
}

/// A loaded table.
#[pyclass(module = "wbal", name = "Dataset", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Parses CSV text. `separator` is "comma", "semicolon" or "tab";
    /// `quote` is "double", "single" or "none".
    #[staticmethod]
    #[pyo3(signature = (text, header = true, separator = "comma", quote = "double"))]
    fn from_csv(text: &str, header: bool, separator: &str, quote: &str) -> PyResult<Self> {
        let options = ParseOptions {
            header,
            separator: parse_separator(separator)?,
            quote: serde_json::from_value(serde_json::Value::String(quote.to_lowercase())).map_err(err)?,
        };
        let inner = data::load_csv(text.as_bytes(), &options).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (seed = example::DEFAULT_SEED, n_per_group = example::DEFAULT_PER_GROUP))]
    fn example(seed: u64, n_per_group: usize) -> PyResult<Self> {
        let inner = example::generate_example_dataset(seed, n_per_group).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_rows(&self) -> usize {
        self.inner.n_rows()
    }

    #[getter]
    fn column_names(&self) -> Vec<String> {
        self.inner.column_names().into_iter().map(String::from).collect()
    }

    /// Numeric values of one column; missing entries and categorical
    /// columns give `None`.
    fn column(&self, name: &str) -> PyResult<Vec<Option<f64>>> {
        let col = self.inner.require(name).map_err(err)?;
        Ok((0..col.len()).map(|i| col.numeric_value(i)).collect())
    }

    /// Per-variable summary tables as a list of dicts.
    fn summary(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &data::summarize(&self.inner, None).map_err(err)?)
    }

    #[pyo3(signature = (separator = "comma"))]
    fn to_csv(&self, separator: &str) -> PyResult<String> {
        let bytes = data::write_csv(&self.inner, parse_separator(separator)?);
        String::from_utf8(bytes).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.n_rows()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n_rows={}, columns={})", self.inner.n_rows(), self.inner.columns().len())
    }
}

/// A completed analysis.
#[pyclass(module = "wbal", name = "Analysis", frozen)]
pub struct PyAnalysis {
    inner: pipeline::Analysis,
}

#[pymethods]
impl PyAnalysis {
    #[getter]
    fn effect(&self) -> f64 {
        self.inner.effect.effect
    }

    #[getter]
    fn chosen(&self) -> String {
        self.inner.chosen.to_string()
    }

    #[getter]
    fn recommended(&self) -> Option<String> {
        self.inner.balance.recommended.map(|a| a.to_string())
    }

    #[getter]
    fn rationale(&self) -> String {
        self.inner.balance.rationale.clone()
    }

    #[getter]
    fn n_analysed(&self) -> usize {
        self.inner.design.n()
    }

    /// Ids of the algorithms whose weights were computed.
    #[getter]
    fn algorithms(&self) -> Vec<String> {
        self.inner.weighting.weight_sets.iter().map(|w| w.algorithm.to_string()).collect()
    }

    /// `(algorithm id, message)` for every engine that failed.
    #[getter]
    fn failures(&self) -> Vec<(String, String)> {
        self.inner
            .weighting
            .failures
            .iter()
            .map(|f| (f.algorithm.to_string(), f.message.clone()))
            .collect()
    }

    /// Weights of one algorithm (default: the chosen one), in analysed-row
    /// order.
    #[pyo3(signature = (algorithm = None))]
    fn weights(&self, algorithm: Option<&str>) -> PyResult<Vec<f64>> {
        let alg = match algorithm {
            Some(a) => a.parse::<Algorithm>().map_err(err)?,
            None => self.inner.chosen,
        };
        self.inner
            .weighting
            .get(alg)
            .map(|w| w.w.clone())
            .ok_or_else(|| WbalError::new_err(format!("no weights for {alg}")))
    }

    fn balance(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.balance)
    }

    fn effect_table(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.effect)
    }

    fn sensitivity(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.sensitivity)
    }

    #[pyo3(signature = (title = None))]
    fn report_html(&self, title: Option<&str>) -> String {
        let mut ctx = ReportContext::from_analysis(&self.inner);
        if let Some(t) = title {
            ctx.title = t;
        }
        render_report(&ctx)
    }

    /// Analysed rows plus one weight column per algorithm, as CSV text.
    fn export_csv(&self) -> PyResult<String> {
        let a = &self.inner;
        let bytes =
            export_data_and_weights(&a.data, &a.design, &a.weighting.weight_sets, Separator::Comma).map_err(err)?;
        String::from_utf8(bytes).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Analysis(chosen={}, effect={:.4}, n={})",
            self.inner.chosen,
            self.inner.effect.effect,
            self.inner.design.n()
        )
    }
}

/// Runs the whole pipeline. `request` is a dict (or JSON string) with
/// `spec` and optional `trims`, `algorithms`, `engine`, `choice` and
/// `sensitivity`.
#[pyfunction]
fn run_analysis(py: Python<'_>, dataset: &PyDataset, request: &Bound<'_, PyAny>) -> PyResult<PyAnalysis> {
    let request: AnalysisRequest = from_py(py, request)?;
    let data = dataset.inner.clone();
    let inner = py.detach(move || pipeline::run_analysis(data, request)).map_err(err)?;
    Ok(PyAnalysis { inner })
}

/// The analysis set-up for the example dataset, as a dict.
#[pyfunction]
#[pyo3(signature = (estimand = "ATT"))]
fn example_spec(py: Python<'_>, estimand: &str) -> PyResult<Py<PyAny>> {
    to_py(py, &example::example_spec(parse_estimand(estimand)?))
}

/// Kish effective sample size.
#[pyfunction]
fn ess(weights: Vec<f64>) -> f64 {
    balance::ess(&weights)
}

#[pyfunction]
#[pyo3(signature = (x, treated, weights, estimand = "ATT"))]
fn weighted_smd(x: Vec<f64>, treated: Vec<bool>, weights: Vec<f64>, estimand: &str) -> PyResult<f64> {
    balance::weighted_smd(&x, &treated, &weights, parse_estimand(estimand)?).map_err(err)
}

#[pyfunction]
fn weighted_ks(x: Vec<f64>, treated: Vec<bool>, weights: Vec<f64>) -> PyResult<f64> {
    balance::weighted_ks(&x, &treated, &weights).map_err(err)
}

/// Ids of every weighting algorithm.
#[pyfunction]
fn algorithms() -> Vec<String> {
    Algorithm::ALL.iter().map(|a| a.to_string()).collect()
}

#[pymodule]
#[pyo3(name = "wbal")]
fn wbal_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", wbal_core::VERSION)?;
    m.add("TRUE_EFFECT", example::TRUE_EFFECT)?;
    m.add("WbalError", m.py().get_type::<WbalError>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyAnalysis>()?;
    m.add_function(wrap_pyfunction!(run_analysis, m)?)?;
    m.add_function(wrap_pyfunction!(example_spec, m)?)?;
    m.add_function(wrap_pyfunction!(ess, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_smd, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_ks, m)?)?;
    m.add_function(wrap_pyfunction!(algorithms, m)?)?;
    Ok(())
}
