//! Python bindings. Records cross the boundary as plain dicts
//! `{"id", "label", "frames"}` with `None` marking a missing frame.

use pyo3::exceptions::{PyArithmeticError, PyKeyError, PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use vbcdhmm::classifier::{self, train_bank, BankConfig, ScoreOptions};
use vbcdhmm::data::{self, GeneratorSpec, PcaTarget, SequenceRecord};
use vbcdhmm::{Error, Frame, ModelBank, PredictiveParams, TrainConfig, TrainedModel};

fn err(e: Error) -> PyErr {
    match e {
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::UnknownLabel(_) => PyKeyError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = obj.py().import("json")?;
    let text: String = json.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn frames(raw: Vec<Option<Vec<f64>>>) -> Vec<Frame> {
    raw.into_iter().map(|f| f.map_or_else(Frame::missing, Frame::present)).collect()
}

fn parse_params(s: &str) -> PyResult<PredictiveParams> {
    s.parse().map_err(err)
}

/// A single trained class model.
#[pyclass(name = "Model", module = "vbcdhmm_py", frozen)]
struct PyModel {
    inner: TrainedModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        data::load_model(path).map(|inner| PyModel { inner }).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        data::model_from_str(text).map(|inner| PyModel { inner }).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        data::save_model(path, &self.inner).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        data::model_to_string(&self.inner).map_err(err)
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.hyper.n_states
    }

    #[getter]
    fn max_lag(&self) -> usize {
        self.inner.hyper.max_lag
    }

    #[getter]
    fn elbo_trace(&self) -> Vec<f64> {
        self.inner.elbo_trace.clone()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    /// Expected lag transition matrix, rows summing to 1.
    fn dependence_matrix(&self) -> Vec<Vec<f64>> {
        classifier::dependence_matrix(&self.inner)
    }

    /// Predictive log-likelihood of one sequence (frames already preprocessed).
    #[pyo3(signature = (frames, params = "starred"))]
    fn score(&self, py: Python<'_>, frames: Vec<Option<Vec<f64>>>, params: &str) -> PyResult<f64> {
        let params = parse_params(params)?;
        let frames = self::frames(frames);
        py.detach(|| classifier::score(&self.inner, &frames, params)).map_err(err)
    }
}

/// One model per class label plus optional PCA preprocessing.
#[pyclass(name = "ModelBank", module = "vbcdhmm_py", frozen)]
struct PyModelBank {
    inner: ModelBank,
}

#[pymethods]
impl PyModelBank {
    /// Train on labelled records; returns `(bank, report)`.
    #[staticmethod]
    #[pyo3(signature = (records, states, mixtures, max_lag = 2, pca_dim = None, seed = 0, max_iters = 200, tol = 1e-6))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        py: Python<'py>,
        records: &Bound<'py, PyAny>,
        states: Vec<usize>,
        mixtures: Vec<usize>,
        max_lag: usize,
        pca_dim: Option<usize>,
        seed: u64,
        max_iters: usize,
        tol: f64,
    ) -> PyResult<(Self, Bound<'py, PyAny>)> {
        let records: Vec<SequenceRecord> = from_py(records)?;
        let grid = states.iter().flat_map(|&n| mixtures.iter().map(move |&m| (n, m))).collect();
        let train = TrainConfig { max_iters, rel_tol: tol, seed, min_iters: 3.min(max_iters) };
        let config = BankConfig { grid, max_lag, pca: pca_dim.map(PcaTarget::Dim), train };
        let (bank, report) = py.detach(|| train_bank(&records, &config)).map_err(err)?;
        Ok((PyModelBank { inner: bank }, to_py(py, &report)?))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        data::load_bank(path).map(|inner| PyModelBank { inner }).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        data::bank_from_str(text).map(|inner| PyModelBank { inner }).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        data::save_bank(path, &self.inner).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        data::bank_to_string(&self.inner).map_err(err)
    }

    fn labels(&self) -> Vec<String> {
        self.inner.labels()
    }

    fn model(&self, label: &str) -> PyResult<PyModel> {
        let inner = self.inner.models.get(label).ok_or_else(|| err(Error::UnknownLabel(label.into())))?;
        Ok(PyModel { inner: inner.clone() })
    }

    /// Returns `(label, {label: score})` for one raw sequence.
    #[pyo3(signature = (frames, params = "starred", per_frame = false))]
    fn classify(
        &self,
        py: Python<'_>,
        frames: Vec<Option<Vec<f64>>>,
        params: &str,
        per_frame: bool,
    ) -> PyResult<(String, Vec<(String, f64)>)> {
        let opts = ScoreOptions { params: parse_params(params)?, per_frame };
        let frames = self::frames(frames);
        let c = py.detach(|| self.inner.classify(&frames, &opts)).map_err(err)?;
        Ok((c.label, c.scores))
    }

    /// Accuracy, confusion matrix and per-sequence predictions as a dict.
    #[pyo3(signature = (records, params = "starred", per_frame = false))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        records: &Bound<'py, PyAny>,
        params: &str,
        per_frame: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let records: Vec<SequenceRecord> = from_py(records)?;
        let opts = ScoreOptions { params: parse_params(params)?, per_frame };
        let ev = py.detach(|| self.inner.evaluate(&records, &opts)).map_err(err)?;
        to_py(py, &ev)
    }
}

/// Sample `count` sequences of length `frames`; returns `(records, latents)`.
#[pyfunction]
#[pyo3(signature = (spec, frames, count, seed = 0, label = None))]
fn generate<'py>(
    py: Python<'py>,
    spec: &Bound<'py, PyAny>,
    frames: usize,
    count: usize,
    seed: u64,
    label: Option<String>,
) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
    let spec: GeneratorSpec = from_py(spec)?;
    let (mut records, traces) = py.detach(|| data::generate(&spec, frames, count, seed)).map_err(err)?;
    for r in records.iter_mut() {
        r.label.clone_from(&label);
    }
    Ok((to_py(py, &records)?, to_py(py, &traces)?))
}

#[pyfunction]
#[pyo3(signature = (records, fraction, seed = 0))]
fn mask_missing<'py>(
    py: Python<'py>,
    records: &Bound<'py, PyAny>,
    fraction: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let records: Vec<SequenceRecord> = from_py(records)?;
    let masked = data::mask_missing(&records, fraction, seed).map_err(err)?;
    to_py(py, &masked)
}

#[pyfunction]
fn load_dataset<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyAny>> {
    let records = data::load_dataset(path).map_err(err)?;
    to_py(py, &records)
}

#[pyfunction]
fn save_dataset(path: &str, records: &Bound<'_, PyAny>) -> PyResult<()> {
    let records: Vec<SequenceRecord> = from_py(records)?;
    data::save_dataset(path, &records).map_err(err)
}

#[pymodule]
fn vbcdhmm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyModelBank>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(mask_missing, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    Ok(())
}
