//! Python bindings for the core library.
//!
//! Reports and experiment records cross the boundary as plain dicts.

use std::path::PathBuf;

use btm_core::dataman::{self, LabeledDataset, LongTailMode, LongTailSpec, SyntheticSpec};
use btm_core::merge;
use btm_core::metrics::{self, RecallVector, DEFAULT_RECALL_FLOOR};
use btm_core::nncore::{self, Activation, Architecture, ParamVector};
use btm_core::pipeline::{self, StagePlan};
use btm_core::BtmError;
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

fn to_py_err(e: BtmError) -> PyErr {
    match e {
        BtmError::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_obj<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyfunction]
fn generalized_mean(values: Vec<f64>, p: f64) -> PyResult<f64> {
    metrics::generalized_mean(&values, p).map_err(to_py_err)
}

#[pyfunction]
fn harmonic_mean(values: Vec<f64>) -> PyResult<f64> {
    metrics::harmonic_mean(&values).map_err(to_py_err)
}

#[pyfunction]
fn geometric_mean(values: Vec<f64>) -> PyResult<f64> {
    metrics::geometric_mean(&values).map_err(to_py_err)
}

#[pyfunction]
fn per_class_recall(
    predictions: Vec<usize>,
    truth: Vec<usize>,
    n_classes: usize,
) -> PyResult<Vec<f64>> {
    metrics::per_class_recall(&predictions, &truth, n_classes)
        .map(|r| r.values().to_vec())
        .map_err(to_py_err)
}

/// Returns `(recalls, substituted)` with zeros replaced by `floor`.
#[pyfunction]
#[pyo3(signature = (recalls, floor = DEFAULT_RECALL_FLOOR))]
fn sanitize_recalls(recalls: Vec<f64>, floor: f64) -> PyResult<(Vec<f64>, bool)> {
    let r = RecallVector::new(recalls).map_err(to_py_err)?;
    let (clean, substituted) = metrics::sanitize_recalls(&r, floor);
    Ok((clean.values().to_vec(), substituted))
}

/// Power-law class counts. Passing `pareto_alpha` uses that exponent
/// directly instead of matching `imbalance_ratio`.
#[pyfunction]
#[pyo3(signature = (n_classes, max_count, imbalance_ratio, pareto_alpha = None))]
fn pareto_longtail_counts(
    n_classes: usize,
    max_count: usize,
    imbalance_ratio: f64,
    pareto_alpha: Option<f64>,
) -> PyResult<Vec<usize>> {
    let mut spec = LongTailSpec::new(n_classes, max_count, imbalance_ratio, 0);
    if let Some(alpha) = pareto_alpha {
        spec.pareto_alpha = alpha;
        spec.mode = LongTailMode::ParetoAlpha;
    }
    dataman::pareto_longtail_counts(&spec).map_err(to_py_err)
}

#[pyclass(name = "Dataset", module = "btm", frozen)]
struct PyDataset {
    inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (features, labels, n_classes, name = "dataset".to_owned()))]
    fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        n_classes: usize,
        name: String,
    ) -> PyResult<Self> {
        let dim = features.first().map_or(0, Vec::len);
        if features.iter().any(|row| row.len() != dim) {
            return Err(PyValueError::new_err("feature rows have different lengths"));
        }
        let flat: Vec<f64> = features.into_iter().flatten().collect();
        let matrix = Array2::from_shape_vec((labels.len(), dim), flat)
            .map_err(|_| PyValueError::new_err("feature row count differs from label count"))?;
        let inner = LabeledDataset::new(matrix, labels, n_classes, name).map_err(to_py_err)?;
        Ok(Self { inner })
    }

    /// Long-tailed train set and balanced test set from a Gaussian mixture.
    #[staticmethod]
    #[pyo3(signature = (classes = 20, dim = 16, max_count = 500, imbalance_ratio = 100.0, seed = 0, separation = 3.0, test_per_class = 200))]
    fn synthetic(
        classes: usize,
        dim: usize,
        max_count: usize,
        imbalance_ratio: f64,
        seed: u64,
        separation: f64,
        test_per_class: usize,
    ) -> PyResult<(Self, Self)> {
        let spec = SyntheticSpec {
            classes,
            dim,
            separation,
            max_count,
            imbalance_ratio,
            test_per_class,
            ..SyntheticSpec::desk_default(seed)
        };
        let (train, test) = spec.build().map_err(to_py_err)?;
        Ok((Self { inner: train }, Self { inner: test }))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: dataman::read_dataset(&path).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn load_idx(images: PathBuf, labels: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: dataman::load_idx(&images, &labels).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataman::write_dataset(&self.inner, &path).map_err(to_py_err)
    }

    fn fewshot(&self, n_per_class: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: dataman::sample_balanced_fewshot(&self.inner, n_per_class, seed)
                .map_err(to_py_err)?,
        })
    }

    fn longtail(&self, counts: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: dataman::downsample_to_longtail(&self.inner, &counts, seed)
                .map_err(to_py_err)?,
        })
    }

    fn union(&self, other: &PyDataset) -> PyResult<Self> {
        Ok(Self {
            inner: dataman::union_datasets(&self.inner, &other.inner).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_owned()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts().to_vec()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        self.inner
            .features()
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect()
    }

    fn imbalance_ratio(&self) -> f64 {
        dataman::imbalance_ratio(&self.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name={:?}, samples={}, dim={}, classes={})",
            self.inner.name(),
            self.inner.len(),
            self.inner.dim(),
            self.inner.n_classes()
        )
    }
}

#[pyclass(name = "Checkpoint", module = "btm", frozen)]
struct PyCheckpoint {
    inner: nncore::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    /// Freshly initialized MLP.
    #[staticmethod]
    #[pyo3(signature = (layer_dims, seed = 0, activation = "relu"))]
    fn init(layer_dims: Vec<usize>, seed: u64, activation: &str) -> PyResult<Self> {
        let activation = match activation {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown activation {other:?}"
                )))
            }
        };
        let arch = Architecture::new(layer_dims, activation).map_err(to_py_err)?;
        let params = nncore::init_params(&arch, seed).map_err(to_py_err)?;
        Ok(Self {
            inner: nncore::Checkpoint::new(&params, "init", seed, None),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: nncore::Checkpoint::load(&path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    #[getter]
    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn stage_tag(&self) -> String {
        self.inner.stage_tag().to_owned()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }

    #[getter]
    fn parent_hash(&self) -> Option<String> {
        self.inner.parent_hash().map(str::to_owned)
    }

    #[getter]
    fn layer_dims(&self) -> Vec<usize> {
        self.inner.arch().layer_dims.clone()
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.params().values().to_vec()
    }

    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
        evaluate(py, self, dataset)
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(stage_tag={:?}, layer_dims={:?}, hash={})",
            self.inner.stage_tag(),
            self.inner.arch().layer_dims,
            &self.inner.hash()[..12]
        )
    }
}

fn params_of(models: &[PyRef<'_, PyCheckpoint>]) -> Vec<ParamVector> {
    models.iter().map(|m| m.inner.params().clone()).collect()
}

fn merged(first: &PyCheckpoint, params: ParamVector, tag: &str) -> PyCheckpoint {
    PyCheckpoint {
        inner: first.inner.derive(&params, tag, first.inner.seed()),
    }
}

/// `lam * a + (1 - lam) * b`.
#[pyfunction]
fn interpolate(a: &PyCheckpoint, b: &PyCheckpoint, lam: f64) -> PyResult<PyCheckpoint> {
    let p = merge::interpolate(a.inner.params(), b.inner.params(), lam).map_err(to_py_err)?;
    Ok(merged(a, p, "interpolate"))
}

#[pyfunction]
fn average_merge(models: Vec<PyRef<'_, PyCheckpoint>>) -> PyResult<PyCheckpoint> {
    let first = models
        .first()
        .ok_or_else(|| PyValueError::new_err("no models to merge"))?;
    let p = merge::average_merge(&params_of(&models)).map_err(to_py_err)?;
    Ok(merged(first, p, "average"))
}

/// Merge weighted by each model's normalized score.
#[pyfunction]
fn adaptive_merge(
    models: Vec<PyRef<'_, PyCheckpoint>>,
    scores: Vec<f64>,
) -> PyResult<PyCheckpoint> {
    let first = models
        .first()
        .ok_or_else(|| PyValueError::new_err("no models to merge"))?;
    let p = merge::adaptive_merge(&params_of(&models), &scores).map_err(to_py_err)?;
    Ok(merged(first, p, "adaptive"))
}

#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: &PyCheckpoint,
    dataset: &PyDataset,
) -> PyResult<Bound<'py, PyAny>> {
    let report = metrics::evaluate(&checkpoint.inner, &dataset.inner).map_err(to_py_err)?;
    json_obj(py, &report)
}

/// List of `(lambda, report)` pairs on an even grid over `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (a, b, dataset, grid = 11))]
fn lambda_sweep<'py>(
    py: Python<'py>,
    a: &PyCheckpoint,
    b: &PyCheckpoint,
    dataset: &PyDataset,
    grid: usize,
) -> PyResult<Vec<(f64, Bound<'py, PyAny>)>> {
    let curve = merge::lambda_sweep(a.inner.params(), b.inner.params(), grid, &dataset.inner)
        .map_err(to_py_err)?;
    curve
        .lambdas
        .iter()
        .zip(&curve.reports)
        .map(|(&l, r)| Ok((l, json_obj(py, r)?)))
        .collect()
}

/// Runs both arms. `plan` is a JSON stage plan; the desk default when
/// omitted. Returns a dict with `record`, `summary_csv` and `checkpoints`.
#[pyfunction]
#[pyo3(signature = (train, test, seed = 0, plan = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    train: &PyDataset,
    test: &PyDataset,
    seed: u64,
    plan: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let plan: StagePlan = match plan {
        Some(text) => serde_json::from_str(text)
            .map_err(|e| PyValueError::new_err(format!("invalid plan: {e}")))?,
        None => StagePlan::desk_default(),
    };
    let plan = plan.reseeded(seed);
    let run = py
        .detach(|| pipeline::run_experiment(&plan, &train.inner, &test.inner))
        .map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("record", json_obj(py, &run.record)?)?;
    out.set_item("summary_csv", run.record.summary_csv())?;
    let ckpts = PyDict::new(py);
    for (name, ckpt) in run.checkpoints {
        ckpts.set_item(name, PyCheckpoint { inner: ckpt })?;
    }
    out.set_item("checkpoints", ckpts)?;
    Ok(out)
}

#[pymodule]
fn btm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DEFAULT_RECALL_FLOOR", DEFAULT_RECALL_FLOOR)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(generalized_mean, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_mean, m)?)?;
    m.add_function(wrap_pyfunction!(geometric_mean, m)?)?;
    m.add_function(wrap_pyfunction!(per_class_recall, m)?)?;
    m.add_function(wrap_pyfunction!(sanitize_recalls, m)?)?;
    m.add_function(wrap_pyfunction!(pareto_longtail_counts, m)?)?;
    m.add_function(wrap_pyfunction!(interpolate, m)?)?;
    m.add_function(wrap_pyfunction!(average_merge, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_merge, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
