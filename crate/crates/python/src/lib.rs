//! Python bindings: configs, models, the KV runtime, training, the cost model
//! and the angular-distance profiler.
//!
//! Validation errors surface as `ValueError`, everything else as
//! `RuntimeError`. Tensors cross the boundary as nested lists.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use uyoco::analysis::{angular_distance as angular, layer_profile};
use uyoco::checkpoint::{load_checkpoint, save_checkpoint};
use uyoco::cost::{reproduce_paper_kv_table, ArchDescriptor, CostReport};
use uyoco::runtime::{cache_stats, decode_step, greedy_generate, prefill, KvState};
use uyoco::train::{train as train_model, TaskKind, TaskSpec, TrainOptions};
use uyoco::{build_model, model_forward, param_count, Family, ModelConfig, ModelParams, Tensor};

fn py_err(e: uyoco::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f32>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Applies `key=str(value)` pairs through `set`.
fn apply_kwargs(
    kwargs: Option<&Bound<'_, PyDict>>,
    mut set: impl FnMut(&str, &str) -> uyoco::Result<()>,
) -> PyResult<()> {
    if let Some(kw) = kwargs {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            let value = v.str()?.to_string();
            set(&key, &value).map_err(py_err)?;
        }
    }
    Ok(())
}

#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyConfig {
    /// Desk defaults for `family`, then `loops`, then any config key as a
    /// keyword (`d_model=32`, `window=4`, ...).
    #[new]
    #[pyo3(signature = (family = "uyoco", loops = None, **overrides))]
    fn new(family: &str, loops: Option<usize>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let family: Family = family.parse().map_err(py_err)?;
        let mut inner = ModelConfig::desk(family);
        if let Some(t) = loops {
            inner.loops = t;
        }
        apply_kwargs(overrides, |k, v| inner.set(k, v))?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ModelConfig::from_kv_text(text).map_err(py_err)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_kv_text()
    }

    /// Every field as a `{key: str}` dict.
    fn to_dict(&self) -> BTreeMap<&'static str, String> {
        self.inner.to_pairs().into_iter().collect()
    }

    fn plan(&self) -> Vec<String> {
        self.inner.plan().iter().map(|s| format!("{s:?}")).collect()
    }

    fn param_count(&self) -> usize {
        param_count(&self.inner)
    }

    #[getter]
    fn family(&self) -> String {
        self.inner.family.to_string()
    }

    #[getter]
    fn loops(&self) -> usize {
        self.inner.loops
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers
    }

    #[getter]
    fn window(&self) -> usize {
        self.inner.window
    }

    #[getter]
    fn vocab(&self) -> usize {
        self.inner.vocab
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(family={}, loops={}, d_model={}, n_layers={})",
            self.inner.family, self.inner.loops, self.inner.d_model, self.inner.n_layers
        )
    }
}

#[pyclass(name = "Model")]
pub struct PyModel {
    cfg: ModelConfig,
    params: Arc<ModelParams>,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized from `config.seed`.
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let params = build_model(&config.inner).map_err(py_err)?;
        Ok(Self {
            cfg: config.inner.clone(),
            params: Arc::new(params),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (cfg, params) = load_checkpoint(&path).map_err(py_err)?;
        Ok(Self {
            cfg,
            params: Arc::new(params),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.cfg, &self.params).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig { inner: self.cfg.clone() }
    }

    /// Enumerated parameter elements.
    fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Logits `[len(tokens)][vocab]` from a full causal pass.
    fn forward(&self, tokens: Vec<usize>) -> PyResult<Vec<Vec<f32>>> {
        Ok(rows(&model_forward(&tokens, &self.cfg, &self.params).map_err(py_err)?))
    }

    fn generate(&self, prompt: Vec<usize>, steps: usize) -> PyResult<Vec<usize>> {
        greedy_generate(&prompt, steps, &self.params, &self.cfg).map_err(py_err)
    }

    /// Starts incremental decoding; the returned session owns its caches.
    fn prefill(&self, tokens: Vec<usize>) -> PyResult<(PySession, Vec<f32>)> {
        let (state, logits) = prefill(&tokens, &self.params, &self.cfg, false).map_err(py_err)?;
        let session = PySession {
            cfg: self.cfg.clone(),
            params: Arc::clone(&self.params),
            state,
        };
        Ok((session, logits.data().to_vec()))
    }

    /// Angular distance between consecutive layer passes, averaged over
    /// tokens then sequences.
    fn profile(&self, batch: Vec<Vec<usize>>) -> PyResult<Vec<BTreeMap<&'static str, String>>> {
        let p = layer_profile(&self.cfg, &self.params, &batch).map_err(py_err)?;
        Ok(p
            .entries
            .iter()
            .map(|e| {
                BTreeMap::from([
                    ("from", format!("{:?}", e.from)),
                    ("to", format!("{:?}", e.to)),
                    ("mean_distance", e.mean_distance.to_string()),
                    ("crosses_blocks", e.crosses_blocks().to_string()),
                ])
            })
            .collect())
    }
}

#[pyclass(name = "Session")]
pub struct PySession {
    cfg: ModelConfig,
    params: Arc<ModelParams>,
    state: KvState,
}

#[pymethods]
impl PySession {
    /// Feeds one token and returns next-token logits.
    fn step(&mut self, token: usize) -> PyResult<Vec<f32>> {
        let logits = decode_step(&mut self.state, token, &self.params, &self.cfg).map_err(py_err)?;
        Ok(logits.data().to_vec())
    }

    fn __len__(&self) -> usize {
        self.state.produced_len()
    }

    /// Live cache element counts, split into context-length and window-bounded.
    fn cache_stats(&self) -> BTreeMap<&'static str, usize> {
        let s = cache_stats(&self.state);
        BTreeMap::from([("global", s.global_elems), ("local", s.local_elems), ("total", s.total_elems())])
    }

    #[pyo3(signature = (bytes_per_elem = 2))]
    fn dump(&self, bytes_per_elem: usize) -> String {
        self.state.dump(bytes_per_elem)
    }
}

fn task_for(kind: &str, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<TaskSpec> {
    let kind: TaskKind = kind.parse().map_err(py_err)?;
    let mut task = match kind {
        TaskKind::Copy => TaskSpec::copy(6, 32),
        TaskKind::NeedleKv => TaskSpec::needle(32, 4, 32),
        TaskKind::CharLm => TaskSpec::char_lm(32),
    };
    let mut seq_len_given = false;
    apply_kwargs(overrides, |k, v| {
        seq_len_given |= k == "seq_len";
        task.set(k, v)
    })?;
    if kind == TaskKind::Copy && !seq_len_given {
        task.seq_len = 2 * task.copy_len + 1;
    }
    task.validate().map_err(py_err)?;
    Ok(task)
}

/// Trains a fresh model; task fields (`copy_len`, `seq_len`, ...) go in as
/// keywords. Returns the trained model and a summary dict.
#[pyfunction]
#[pyo3(signature = (config, task = "copy", steps = 200, batch_size = 16, lr = None, **task_overrides))]
fn train<'py>(
    py: Python<'py>,
    config: &PyConfig,
    task: &str,
    steps: usize,
    batch_size: usize,
    lr: Option<f32>,
    task_overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<(PyModel, Bound<'py, PyDict>)> {
    let mut spec = task_for(task, task_overrides)?;
    spec.seed = config.inner.seed;
    let mut opts = TrainOptions {
        steps,
        batch_size,
        ..TrainOptions::default()
    };
    if let Some(lr) = lr {
        opts.optimizer.lr = lr;
    }
    let cfg = config.inner.clone();
    let run = py.detach(|| train_model(&cfg, &spec, &opts)).map_err(py_err)?;
    let summary = PyDict::new(py);
    summary.set_item("losses", run.losses.clone())?;
    summary.set_item("eval_loss", run.eval_loss)?;
    summary.set_item("eval_accuracy", run.eval_accuracy)?;
    let model = PyModel {
        cfg,
        params: Arc::new(run.params),
    };
    Ok((model, summary))
}

#[pyfunction]
fn angular_distance(a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    angular(&a, &b).map_err(py_err)
}

/// Analytic KV bytes and MAC counts at context length `n`.
#[pyfunction]
#[pyo3(signature = (config, n, bytes_per_elem = 2))]
fn cost_report(config: &PyConfig, n: u64, bytes_per_elem: u64) -> PyResult<BTreeMap<&'static str, u64>> {
    let a = ArchDescriptor::from_config(&config.inner, bytes_per_elem).map_err(py_err)?;
    let r = CostReport::new(config.inner.family.name(), &a, n);
    Ok(BTreeMap::from([
        ("n", n),
        ("kv_global_bytes", r.kv.global),
        ("kv_local_bytes", r.kv.local),
        ("kv_bytes", r.kv.total()),
        ("prefill_macs", r.prefill.total()),
        ("decode_macs", r.decode.total()),
    ]))
}

/// The reference KV occupancy table recomputed cell by cell.
#[pyfunction]
fn paper_kv_table<'py>(py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    reproduce_paper_kv_table()
        .cells
        .iter()
        .map(|c| {
            let d = PyDict::new(py);
            d.set_item("row", c.row)?;
            d.set_item("n", c.n)?;
            d.set_item("expected_mib", c.expected_mib)?;
            d.set_item("computed_mib", c.computed_mib())?;
            d.set_item("matches", c.matches())?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn uyoco_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(angular_distance, m)?)?;
    m.add_function(wrap_pyfunction!(cost_report, m)?)?;
    m.add_function(wrap_pyfunction!(paper_kv_table, m)?)?;
    m.add("FAMILIES", Family::ALL.iter().map(|f| f.name()).collect::<Vec<_>>())?;
    Ok(())
}
