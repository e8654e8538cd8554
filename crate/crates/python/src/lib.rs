//! Python bindings: dataset generation and IO, training, evaluation,
//! retrieval probing, gradient checks and checkpoints.

use std::path::PathBuf;

use hope_core::data::{self, CompositionDataset, GeneratorSpec, Pair, Sample};
use hope_core::diagnostics::{loss_grad_checks, GradCheckInstance, CHECKED_LOSSES};
use hope_core::evaluation::{self, bias_sweep as core_bias_sweep, expert_allocation, merge_json, retrieval_probe, World};
use hope_core::model::HopeModel;
use hope_core::numerics::{GradCheckOptions, Matrix};
use hope_core::training::{self, load_checkpoint, save_checkpoint, EpochMetrics, OptimizerState, TrainConfig};
use hope_core::HopeError;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn err(e: HopeError) -> PyErr {
    match e {
        HopeError::Io(_) => PyOSError::new_err(e.to_string()),
        HopeError::Training(_) | HopeError::Init(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn loads<'py>(py: Python<'py>, json: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (json,))
}

fn dumps(py: Python<'_>, obj: Option<&Bound<'_, PyDict>>) -> PyResult<serde_json::Value> {
    let text: String = match obj {
        Some(d) => py.import("json")?.call_method1("dumps", (d,))?.extract()?,
        None => "{}".into(),
    };
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py>(py: Python<'py>, json: serde_json::Result<String>) -> PyResult<Bound<'py, PyAny>> {
    loads(py, &json.map_err(|e| PyValueError::new_err(e.to_string()))?)
}

/// Default config with the keyword overrides merged in.
fn train_config(py: Python<'_>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<TrainConfig> {
    let mut base = serde_json::to_value(TrainConfig::default()).map_err(|e| PyValueError::new_err(e.to_string()))?;
    merge_json(&mut base, &dumps(py, overrides)?);
    TrainConfig::from_json(&base.to_string()).map_err(err)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn pairs(ps: &[Pair]) -> Vec<(usize, usize)> {
    ps.iter().map(|p| (p.attr, p.obj)).collect()
}

fn split(samples: &[Sample]) -> (Vec<Vec<f64>>, Vec<(usize, usize)>) {
    (
        samples.iter().map(|s| s.embedding.clone()).collect(),
        samples.iter().map(|s| (s.label.attr, s.label.obj)).collect(),
    )
}

fn world(name: &str) -> PyResult<World> {
    match name {
        "closed" => Ok(World::Closed),
        "open" => Ok(World::Open),
        other => Err(PyValueError::new_err(format!("world must be 'closed' or 'open', got {other:?}"))),
    }
}

/// Synthetic composition dataset of frozen image embeddings.
#[pyclass(name = "Dataset", module = "hope_czsl", frozen)]
struct PyDataset {
    inner: CompositionDataset,
}

#[pymethods]
impl PyDataset {
    /// Generates a dataset; keyword arguments override generator defaults.
    #[staticmethod]
    #[pyo3(signature = (**spec))]
    fn generate(py: Python<'_>, spec: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut base = serde_json::to_value(GeneratorSpec::default()).map_err(|e| PyValueError::new_err(e.to_string()))?;
        merge_json(&mut base, &dumps(py, spec)?);
        let spec: GeneratorSpec = serde_json::from_value(base).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let inner = py.detach(|| data::generate(&spec)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn attributes(&self) -> Vec<String> {
        self.inner.vocab.attributes.clone()
    }

    #[getter]
    fn objects(&self) -> Vec<String> {
        self.inner.vocab.objects.clone()
    }

    #[getter]
    fn seen_pairs(&self) -> Vec<(usize, usize)> {
        pairs(&self.inner.vocab.seen_pairs)
    }

    #[getter]
    fn unseen_pairs(&self) -> Vec<(usize, usize)> {
        pairs(&self.inner.vocab.unseen_closed)
    }

    /// `(embeddings, labels)` of the train split.
    fn train_split(&self) -> (Vec<Vec<f64>>, Vec<(usize, usize)>) {
        split(&self.inner.train)
    }

    /// `(embeddings, labels)` of the test split.
    fn test_split(&self) -> (Vec<Vec<f64>>, Vec<(usize, usize)>) {
        split(&self.inner.test)
    }

    fn __repr__(&self) -> String {
        let v = &self.inner.vocab;
        format!(
            "Dataset(attrs={}, objects={}, dim={}, seen={}, unseen={}, train={}, test={})",
            v.n_attrs(),
            v.n_objs(),
            v.dim,
            v.seen_pairs.len(),
            v.unseen_closed.len(),
            self.inner.train.len(),
            self.inner.test.len()
        )
    }
}

/// A trained model with its config and optimizer state.
#[pyclass(name = "Model", module = "hope_czsl", frozen)]
struct PyModel {
    model: HopeModel,
    config: TrainConfig,
    optimizer: OptimizerState,
    metrics: Vec<EpochMetrics>,
}

#[pymethods]
impl PyModel {
    /// Trains on `dataset`; keyword arguments override the default config.
    #[staticmethod]
    #[pyo3(signature = (dataset, **config))]
    fn train(py: Python<'_>, dataset: &PyDataset, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let config = train_config(py, config)?;
        let ds = &dataset.inner;
        let out = py.detach(|| training::train(&config, ds)).map_err(err)?;
        Ok(Self {
            model: out.model,
            config,
            optimizer: out.optimizer,
            metrics: out.metrics,
        })
    }

    /// Untrained model as initialized for `dataset`.
    #[staticmethod]
    #[pyo3(signature = (dataset, **config))]
    fn init(py: Python<'_>, dataset: &PyDataset, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let config = train_config(py, config)?;
        let model = HopeModel::init(&dataset.inner, &config.model, config.seed).map_err(err)?;
        Ok(Self {
            model,
            config,
            optimizer: OptimizerState::default(),
            metrics: Vec::new(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = load_checkpoint(&path).map_err(err)?;
        Ok(Self {
            model: c.model,
            config: c.config,
            optimizer: c.optimizer,
            metrics: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.config, &self.model, &self.optimizer).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        loads(py, &self.config.to_json())
    }

    /// Per-epoch loss components; empty for loaded checkpoints.
    #[getter]
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, serde_json::to_string(&self.metrics))
    }

    /// Named parameter matrices as nested lists.
    fn parameters<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (name, m) in self.model.named_parameters() {
            d.set_item(name, rows(&m))?;
        }
        Ok(d)
    }

    /// Bias-sweep report on the test split.
    #[pyo3(signature = (dataset, world = "closed"))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, world: &str) -> PyResult<Bound<'py, PyAny>> {
        let w = self::world(world)?;
        let r = py.detach(|| evaluation::evaluate(&self.model, &dataset.inner.test, w)).map_err(err)?;
        to_py(py, serde_json::to_string(&r))
    }

    /// Primitive retrieval rates on the test split.
    #[pyo3(signature = (dataset, synonyms = false))]
    fn probe<'py>(&self, py: Python<'py>, dataset: &PyDataset, synonyms: bool) -> PyResult<Bound<'py, PyAny>> {
        let r = retrieval_probe(&self.model, &dataset.inner, synonyms).map_err(err)?;
        to_py(py, serde_json::to_string(&r))
    }

    /// Memory retrieval for one image embedding.
    fn retrieve<'py>(&self, py: Python<'py>, embedding: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.model.retrieve(&embedding).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("winners", r.winners)?;
        d.set_item("scores", rows(&r.scores))?;
        d.set_item("patterns", rows(&r.patterns))?;
        d.set_item("prototypes", rows(&r.prototypes))?;
        Ok(d)
    }

    /// Unit-length fused image features, one row per embedding.
    fn fused_features(&self, embeddings: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&[f64]> = embeddings.iter().map(|e| e.as_slice()).collect();
        Ok(rows(&self.model.fused_features(&refs).map_err(err)?))
    }

    /// Token counts per expert of the first Soft-MoE layer on the test split.
    fn expert_usage(&self, dataset: &PyDataset) -> PyResult<Vec<usize>> {
        Ok(expert_allocation(&self.model, &dataset.inner.test).map_err(err)?.usage())
    }
}

/// Finite-difference check of every loss on a small random model.
#[pyfunction]
#[pyo3(signature = (seed = 0, max_entries = None, tolerance = 1e-4))]
fn grad_check<'py>(py: Python<'py>, seed: u64, max_entries: Option<usize>, tolerance: f64) -> PyResult<Bound<'py, PyList>> {
    let inst = GradCheckInstance {
        seed,
        ..GradCheckInstance::default()
    };
    let opts = GradCheckOptions {
        tolerance,
        max_entries,
        seed,
        ..GradCheckOptions::default()
    };
    let reports = py.detach(|| loss_grad_checks(&inst, &CHECKED_LOSSES, &opts)).map_err(err)?;
    let out = PyList::empty(py);
    for r in reports {
        let d = PyDict::new(py);
        d.set_item("loss", &r.label)?;
        d.set_item("max_rel_error", r.max_rel_error())?;
        d.set_item("passed", r.passed())?;
        out.append(d)?;
    }
    Ok(out)
}

/// Seen/unseen accuracy curve, best harmonic mean and AUC of a score matrix.
#[pyfunction]
fn bias_sweep<'py>(
    py: Python<'py>,
    scores: Vec<Vec<f64>>,
    labels: Vec<usize>,
    seen_columns: Vec<bool>,
) -> PyResult<Bound<'py, PyAny>> {
    let m = Matrix::from_rows(&scores).map_err(err)?;
    let r = core_bias_sweep(&m, &labels, &seen_columns).map_err(err)?;
    to_py(py, serde_json::to_string(&r))
}

#[pymodule]
fn hope_czsl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(bias_sweep, m)?)?;
    Ok(())
}
