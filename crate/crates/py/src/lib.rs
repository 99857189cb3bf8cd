//! Python bindings: model checkpoints, channel masks, cache decoding and
//! the analysis helpers. Structured results come back as plain dicts.

use std::path::PathBuf;

use leank::analysis::{self, QueryMode};
use leank::cache::{self, CacheSettings};
use leank::io;
use leank::mask::{self, BinaryChannelMask, ChannelDims, ScalingFactors};
use leank::model::{self, ModelConfig, ToyTransformer};
use leank::pipeline::{self, ExperimentConfig};
use leank::tasks::{TaskKind, TaskMix, TokenLayout};
use leank::tensor::Tensor;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

fn err(e: leank::error::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_json<T: serde::de::DeserializeOwned>(s: &str) -> PyResult<T> {
    serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Toy GQA transformer.
#[pyclass(name = "ToyModel", frozen)]
pub struct PyToyModel {
    inner: ToyTransformer,
}

#[pymethods]
impl PyToyModel {
    /// Fresh model; `config_json` defaults to the standard toy config.
    #[staticmethod]
    #[pyo3(signature = (seed, config_json=None))]
    fn init(seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let config: ModelConfig = match config_json {
            Some(s) => parse_json(s)?,
            None => ExperimentConfig::default().model,
        };
        Ok(Self {
            inner: ToyTransformer::init(config, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_checkpoint(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    /// Last-block hidden states for every position.
    fn forward_full(&self, tokens: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let rec = model::forward_full(&self.inner, &tokens, 0).map_err(err)?;
        Ok((0..rec.len()).map(|i| rec.hidden.row(i).to_vec()).collect())
    }

    /// Answer-row hidden states with middle-region keys scaled by `factors`.
    fn forward_scaled(&self, tokens: Vec<usize>, n_ans: usize, factors: Vec<f64>, sink: usize, window: usize) -> PyResult<Vec<Vec<f64>>> {
        let n = tokens.len();
        if n_ans > n {
            return Err(PyValueError::new_err("n_ans exceeds the token count"));
        }
        let masks = model::build_masks(n - n_ans, n_ans, sink, window).map_err(err)?;
        let f = Tensor::new(vec![factors.len()], factors).map_err(err)?;
        let h = model::forward_scaled(&self.inner, &tokens, &f, &masks).map_err(err)?;
        Ok((0..h.rows()).map(|i| h.row(i).to_vec()).collect())
    }
}

/// Binary keep mask over `(layer, kv head, channel)`.
#[pyclass(name = "ChannelMask", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyChannelMask {
    inner: BinaryChannelMask,
}

#[pymethods]
impl PyChannelMask {
    #[new]
    fn new(n_layers: usize, n_kv_heads: usize, head_dim: usize, bits: Vec<u8>, r: usize, keep_ratio: f64) -> PyResult<Self> {
        let dims = ChannelDims {
            n_layers,
            n_kv_heads,
            head_dim,
        };
        Ok(Self {
            inner: BinaryChannelMask::new(dims, bits, r, keep_ratio).map_err(err)?,
        })
    }

    #[staticmethod]
    fn full(n_layers: usize, n_kv_heads: usize, head_dim: usize) -> PyResult<Self> {
        let dims = ChannelDims {
            n_layers,
            n_kv_heads,
            head_dim,
        };
        Ok(Self {
            inner: BinaryChannelMask::full(dims, 1).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_beta(&path, None).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_beta(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn bits(&self) -> Vec<u8> {
        self.inner.bits.clone()
    }

    #[getter]
    fn r(&self) -> usize {
        self.inner.r
    }

    #[getter]
    fn keep_ratio(&self) -> f64 {
        self.inner.keep_ratio
    }

    fn kept_channels(&self, layer: usize, head: usize) -> PyResult<Vec<usize>> {
        let d = self.inner.dims;
        if layer >= d.n_layers || head >= d.n_kv_heads {
            return Err(PyValueError::new_err("head out of range"));
        }
        Ok(self.inner.kept_channels(layer, head))
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &mask::mask_stats(&self.inner))
    }

    fn with_streaming_heads(&self, heads: Vec<(usize, usize)>) -> PyResult<Self> {
        Ok(Self {
            inner: cache::with_streaming_heads(&self.inner, &heads).map_err(err)?,
        })
    }
}

fn factors(values: Vec<f64>, n_layers: usize, n_kv_heads: usize, head_dim: usize) -> PyResult<ScalingFactors> {
    let t = Tensor::new(vec![n_layers, n_kv_heads, head_dim], values).map_err(err)?;
    ScalingFactors::from_tensor(t).map_err(err)
}

/// Global top fraction of `values` with per-head counts aligned to `r`.
#[pyfunction]
fn top_s_r(values: Vec<f64>, n_layers: usize, n_kv_heads: usize, head_dim: usize, keep_ratio: f64, r: usize) -> PyResult<PyChannelMask> {
    let alpha = factors(values, n_layers, n_kv_heads, head_dim)?;
    Ok(PyChannelMask {
        inner: mask::top_s_r(&alpha, keep_ratio, r).map_err(err)?,
    })
}

#[pyfunction]
fn memory_report<'py>(py: Python<'py>, mask: &PyChannelMask, sink: usize, window: usize, seq_len: usize, bytes_per_element: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &cache::memory_report(&mask.inner, sink, window, seq_len, bytes_per_element))
}

/// Greedy decode through the partitioned cache. Returns the greedy tokens
/// and the logits after every fed token.
#[pyfunction]
#[pyo3(signature = (model, mask, prompt, forced, n_greedy, sink, window, migrate_every=cache::DEFAULT_MIGRATE_EVERY))]
#[allow(clippy::too_many_arguments)]
fn generate(
    model: &PyToyModel,
    mask: &PyChannelMask,
    prompt: Vec<usize>,
    forced: Vec<usize>,
    n_greedy: usize,
    sink: usize,
    window: usize,
    migrate_every: usize,
) -> PyResult<(Vec<usize>, Vec<Vec<f64>>)> {
    let settings = CacheSettings::new(sink, window).with_migrate_every(migrate_every);
    let (outs, tokens) = cache::generate(&model.inner, &mask.inner, &prompt, &forced, n_greedy, settings).map_err(err)?;
    Ok((tokens, outs.into_iter().map(|o| o.logits).collect()))
}

#[pyfunction]
#[pyo3(signature = (model, tokens, obs_window=analysis::DEFAULT_OBS_WINDOW))]
fn channel_norm_ratios(model: &PyToyModel, tokens: Vec<usize>, obs_window: usize) -> PyResult<Vec<f64>> {
    Ok(analysis::channel_norm_ratios(&model.inner, &tokens, obs_window).map_err(err)?.values)
}

/// Per-head high-frequency ratio; `query_window` averages trailing queries.
#[pyfunction]
#[pyo3(signature = (model, tokens, high_boundary, query_window=None))]
fn high_freq_ratio(model: &PyToyModel, tokens: Vec<usize>, high_boundary: usize, query_window: Option<usize>) -> PyResult<Vec<f64>> {
    let mode = query_window.map_or(QueryMode::Last, QueryMode::Window);
    Ok(analysis::high_freq_ratio(&model.inner, &tokens, high_boundary, mode).map_err(err)?.w_hf)
}

#[pyfunction]
fn pearson(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    analysis::pearson(&a, &b).map_err(err)
}

/// One synthetic task sample as a dict.
#[pyfunction]
#[pyo3(signature = (kind, seq_len, index=0, seed=0, vocab=128))]
fn sample_task<'py>(py: Python<'py>, kind: &str, seq_len: usize, index: u64, seed: u64, vocab: usize) -> PyResult<Bound<'py, PyAny>> {
    let kind = TaskKind::parse(kind).map_err(err)?;
    let layout = TokenLayout::for_vocab(vocab).map_err(err)?;
    let s = TaskMix::only(kind, (seq_len, seq_len), seed).sample(index, &layout).map_err(err)?;
    to_py(py, &s)
}

#[pyfunction]
fn default_config<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &ExperimentConfig::default())
}

fn experiment(config_json: &str) -> PyResult<ExperimentConfig> {
    let c: ExperimentConfig = parse_json(config_json)?;
    c.validate().map_err(err)?;
    Ok(c)
}

/// Runs pretraining for a JSON config under `root`; returns the log.
#[pyfunction]
fn run_pretrain<'py>(py: Python<'py>, config_json: &str, root: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let c = experiment(config_json)?;
    let report = py.detach(|| pipeline::cmd_pretrain(&c, &root)).map_err(err)?;
    to_py(py, &report)
}

#[pyfunction]
fn run_learn_mask(py: Python<'_>, config_json: &str, root: PathBuf) -> PyResult<PyChannelMask> {
    let c = experiment(config_json)?;
    let out = py.detach(|| pipeline::cmd_learn_mask(&c, &root)).map_err(err)?;
    Ok(PyChannelMask { inner: out.beta })
}

#[pyfunction]
fn run_eval<'py>(py: Python<'py>, config_json: &str, root: PathBuf, mode: &str) -> PyResult<Bound<'py, PyAny>> {
    let c = experiment(config_json)?;
    let mode = pipeline::EvalMode::parse(mode).map_err(err)?;
    let report = py.detach(|| pipeline::cmd_eval(&c, &root, mode, None, false)).map_err(err)?;
    to_py(py, &report)
}

#[pymodule]
fn leank_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyToyModel>()?;
    m.add_class::<PyChannelMask>()?;
    m.add_function(wrap_pyfunction!(top_s_r, m)?)?;
    m.add_function(wrap_pyfunction!(memory_report, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(channel_norm_ratios, m)?)?;
    m.add_function(wrap_pyfunction!(high_freq_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(sample_task, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(run_learn_mask, m)?)?;
    m.add_function(wrap_pyfunction!(run_eval, m)?)?;
    Ok(())
}
