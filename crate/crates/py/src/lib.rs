//! Python bindings for the `hesp` crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use hesp::data::{self, OpennessSplit};
use hesp::encoder::Heatmap;
use hesp::metrics::{self, ScoredSample};
use hesp::train::{self, GradCheckConfig};
use hesp::{inference, visual_prompt, HespError};

type Matrix = Vec<Vec<f64>>;

fn to_py(e: HespError) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Openness `1 - sqrt(K / (K + U))`.
#[pyfunction]
fn openness(known: usize, unknown: usize) -> PyResult<f64> {
    data::openness(known, unknown).map_err(to_py)
}

/// A known/unknown class partition.
#[pyclass(name = "Split", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySplit(OpennessSplit);

#[pymethods]
impl PySplit {
    #[new]
    #[pyo3(signature = (known, unknown, seed = 0))]
    fn new(known: Vec<usize>, unknown: Vec<usize>, seed: u64) -> PyResult<Self> {
        OpennessSplit::new(known, unknown, seed)
            .map(Self)
            .map_err(to_py)
    }

    #[getter]
    fn known(&self) -> Vec<usize> {
        self.0.known_classes.clone()
    }

    #[getter]
    fn unknown(&self) -> Vec<usize> {
        self.0.unknown_classes.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[getter]
    fn openness(&self) -> f64 {
        self.0.openness
    }

    fn label(&self) -> String {
        self.0.label()
    }

    fn __repr__(&self) -> String {
        format!(
            "Split({}, known={:?}, unknown={:?})",
            self.0.label(),
            self.0.known_classes,
            self.0.unknown_classes
        )
    }
}

/// `repeats` random partitions of `class_count` classes with `known` known.
#[pyfunction]
#[pyo3(signature = (class_count, known, repeats, seed = 0))]
fn generate_splits(
    class_count: usize,
    known: usize,
    repeats: usize,
    seed: u64,
) -> PyResult<Vec<PySplit>> {
    data::generate_splits(class_count, known, repeats, seed)
        .map(|v| v.into_iter().map(PySplit).collect())
        .map_err(to_py)
}

#[pyfunction]
fn auroc(known: Vec<f64>, unknown: Vec<f64>) -> PyResult<f64> {
    metrics::auroc(&known, &unknown).map_err(to_py)
}

/// OSCR from per-sample knownness, true label (`None` for unknown) and the
/// closed-set prediction.
#[pyfunction]
fn oscr(
    knownness: Vec<f64>,
    true_labels: Vec<Option<usize>>,
    predicted: Vec<usize>,
) -> PyResult<f64> {
    if knownness.len() != true_labels.len() || knownness.len() != predicted.len() {
        return Err(PyValueError::new_err(
            "knownness, true_labels and predicted differ in length",
        ));
    }
    let samples: Vec<ScoredSample> = knownness
        .into_iter()
        .zip(true_labels)
        .zip(predicted)
        .map(|((knownness, true_label), predicted_known)| ScoredSample {
            knownness,
            true_label,
            predicted_known,
        })
        .collect();
    metrics::oscr(&samples).map_err(to_py)
}

/// Returns `(p_kn, p_ne, p_h)` for unit video, text and negative embeddings.
#[pyfunction]
#[pyo3(signature = (video, text, negatives, logit_scale = 100.0, ne_scale = inference::DEFAULT_NE_SCALE, ne_sign = 1.0))]
fn predict(
    video: Vec<Vec<f64>>,
    text: Vec<Vec<f64>>,
    negatives: Vec<Vec<f64>>,
    logit_scale: f64,
    ne_scale: f64,
    ne_sign: f64,
) -> PyResult<(Matrix, Matrix, Matrix)> {
    let p_kn = inference::prediction_known(&video, &text, logit_scale).map_err(to_py)?;
    let p_ne =
        inference::prediction_negative(&video, &negatives, ne_scale, ne_sign).map_err(to_py)?;
    let p_h = inference::fuse(&p_kn, &p_ne).map_err(to_py)?;
    Ok((p_kn, p_ne, p_h))
}

#[pyfunction]
#[pyo3(signature = (known_scores, target_tpr = inference::DEFAULT_TARGET_TPR))]
fn calibrate_threshold(known_scores: Vec<f64>, target_tpr: f64) -> PyResult<f64> {
    inference::calibrate_threshold(&known_scores, target_tpr).map_err(to_py)
}

/// `(top, left)` of the `side × side` window with the largest saliency sum.
#[pyfunction]
fn locate_mask(heatmap: Vec<Vec<f64>>, side: usize) -> PyResult<(usize, usize)> {
    let height = heatmap.len();
    let width = heatmap.first().map_or(0, Vec::len);
    if heatmap.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("heatmap rows differ in length"));
    }
    let map = Heatmap::new(height, width, heatmap.into_iter().flatten().collect());
    let r = visual_prompt::locate_mask_in_heatmap(&map, side).map_err(to_py)?;
    Ok((r.top, r.left))
}

/// Run configuration. Fields are set with dotted or suffix keys, exactly as
/// on the command line.
#[pyclass(name = "RunConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig(train::RunConfig);

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (path = None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        match path {
            Some(p) => train::RunConfig::load(&p).map(Self).map_err(to_py),
            None => Ok(Self(train::RunConfig::default())),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        train::RunConfig::from_toml_str(text)
            .map(Self)
            .map_err(to_py)
    }

    /// Applies `key=value` overrides in order.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.0 = self
            .0
            .with_overrides(&[(key.to_string(), value.to_string())])
            .map_err(to_py)?;
        Ok(())
    }

    fn validate(&self) -> PyResult<()> {
        self.0.validate().map_err(to_py)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.0.to_toml_string().map_err(to_py)
    }

    fn digest(&self) -> String {
        self.0.digest()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(digest={})", &self.0.digest()[..12])
    }
}

/// Aggregated protocol results.
#[pyclass(name = "ProtocolReport", frozen, skip_from_py_object)]
struct PyProtocolReport(train::ProtocolReport);

#[pymethods]
impl PyProtocolReport {
    #[getter]
    fn mean_auroc(&self) -> f64 {
        self.0.mean_auroc
    }

    #[getter]
    fn mean_oscr(&self) -> f64 {
        self.0.mean_oscr
    }

    /// `(label, openness, mean_auroc, mean_oscr, splits)` per openness cell.
    fn cells(&self) -> Vec<(String, f64, f64, f64, usize)> {
        self.0
            .cells
            .iter()
            .map(|c| {
                (
                    c.label.clone(),
                    c.openness,
                    c.mean_auroc,
                    c.mean_oscr,
                    c.reports.len(),
                )
            })
            .collect()
    }

    fn table(&self) -> String {
        self.0.table()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Runs the configured task. With `write = False` nothing touches disk.
#[pyfunction]
#[pyo3(signature = (config, write = true))]
fn run_protocol(py: Python<'_>, config: &PyRunConfig, write: bool) -> PyResult<PyProtocolReport> {
    let cfg = config.0.clone();
    let report = py
        .detach(move || {
            if write {
                train::run_protocol(&cfg)
            } else {
                cfg.validate()?;
                let dataset = train::load_dataset(&cfg)?;
                let encoder = train::load_encoder(&cfg, &dataset)?;
                train::run_protocol_on(&cfg, &encoder, &dataset, None)
            }
        })
        .map_err(to_py)?;
    Ok(PyProtocolReport(report))
}

/// Trains and evaluates a single split; returns `(auroc, oscr, threshold)`.
#[pyfunction]
fn train_split(py: Python<'_>, config: &PyRunConfig, split: &PySplit) -> PyResult<(f64, f64, f64)> {
    let cfg = config.0.clone();
    let split = split.0.clone();
    py.detach(move || {
        cfg.validate()?;
        let dataset = train::load_dataset(&cfg)?;
        let encoder = train::load_encoder(&cfg, &dataset)?;
        let run = train::run_split(&cfg, &encoder, &dataset, &split, None)?;
        let r = run.evaluation.report;
        Ok((r.auroc, r.oscr, r.threshold))
    })
    .map_err(to_py)
}

/// Finite-difference check; returns `(loss, max_rel_error, tolerance, passed)`.
#[pyfunction]
#[pyo3(signature = (directions = 20, seed = 0))]
fn gradcheck(directions: usize, seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let results = train::run_gradcheck(&GradCheckConfig {
        directions,
        seed,
        ..Default::default()
    })
    .map_err(to_py)?;
    Ok(results
        .into_iter()
        .map(|r| {
            let ok = r.passed();
            (r.loss, r.max_rel_error, r.tolerance, ok)
        })
        .collect())
}

#[pymodule]
fn hesp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySplit>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyProtocolReport>()?;
    m.add_function(wrap_pyfunction!(openness, m)?)?;
    m.add_function(wrap_pyfunction!(generate_splits, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(oscr, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(locate_mask, m)?)?;
    m.add_function(wrap_pyfunction!(run_protocol, m)?)?;
    m.add_function(wrap_pyfunction!(train_split, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
