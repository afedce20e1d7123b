//! Python bindings for the latentflow generation library.
//!
//! Exposes the desk-scale surface: model configs, parameter sets with
//! checkpoint I/O, training, sampling, evaluation, and the gradient-check
//! harness. Latents cross the boundary as nested `list[list[float]]`.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use latentflow::flow::{integrate, FrameCount, GenRequest};
use latentflow::model::{FusionMode, ModelConfig, ParamSet};
use latentflow::tasks::{TaskId, Units, LATENT_DIM};
use latentflow::tensor::gradcheck::{run_primitive_suite, DEFAULT_TOLERANCE};
use latentflow::tensor::Tensor;
use latentflow::train::eval::{evaluate, EvalConfig};
use latentflow::train::{
    load_checkpoint, save_checkpoint, train_with_tasks, TrainConfig,
};

fn to_py(e: latentflow::Error) -> PyErr {
    match &e {
        latentflow::Error::Io(..) => PyOSError::new_err(e.to_string()),
        _ if e.is_numeric() => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = *t.shape.last().unwrap_or(&1);
    t.data.chunks(cols).map(|c| c.to_vec()).collect()
}

// ── Config ───────────────────────────────────────────────────────────────

/// Backbone hyperparameters. `desk()` is the trainable reference size,
/// `check()` a minimal shape for fast tests.
#[pyclass(name = "Config")]
#[derive(Clone)]
struct PyConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn desk() -> PyConfig {
        PyConfig { inner: ModelConfig::desk() }
    }

    #[staticmethod]
    fn check() -> PyConfig {
        PyConfig { inner: ModelConfig::check() }
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }

    #[getter]
    fn embed_size(&self) -> usize {
        self.inner.embed_size
    }

    #[getter]
    fn num_heads(&self) -> usize {
        self.inner.num_heads
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim
    }

    #[getter]
    fn fusion_mode(&self) -> &'static str {
        self.inner.fusion_mode.name()
    }

    #[setter]
    fn set_fusion_mode(&mut self, mode: &str) -> PyResult<()> {
        self.inner.fusion_mode = FusionMode::parse(mode).map_err(to_py)?;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(depth={}, embed_size={}, num_heads={}, fusion_mode='{}')",
            self.inner.depth,
            self.inner.embed_size,
            self.inner.num_heads,
            self.inner.fusion_mode.name()
        )
    }
}

// ── Params ───────────────────────────────────────────────────────────────

/// A named parameter set bound to its config; loads from and saves to the
/// binary checkpoint container.
#[pyclass(name = "Params")]
struct PyParams {
    inner: ParamSet,
}

#[pymethods]
impl PyParams {
    /// Seeded initialization.
    #[staticmethod]
    fn init(config: &PyConfig, seed: u64) -> PyResult<PyParams> {
        Ok(PyParams { inner: ParamSet::init(&config.inner, seed).map_err(to_py)? })
    }

    /// Read a checkpoint file. Returns (params, step).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(PyParams, u64)> {
        let (inner, meta) = load_checkpoint(&path, None).map_err(to_py)?;
        Ok((PyParams { inner }, meta.step))
    }

    fn save(&self, path: PathBuf, step: u64) -> PyResult<()> {
        save_checkpoint(&path, &self.inner, step, 0).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig { inner: self.inner.config.clone() }
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().map(str::to_string).collect()
    }

    /// One tensor as (shape, flat values).
    fn get(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self.inner.get(name).map_err(to_py)?;
        Ok((t.shape.clone(), t.data.clone()))
    }

    fn __repr__(&self) -> String {
        let n: usize = self.inner.names().count();
        format!("Params({} tensors, {})", n, self.config().__repr__())
    }
}

fn units_from_py(task: TaskId, units: &Bound<'_, PyAny>) -> PyResult<Units> {
    if let Ok(ids) = units.extract::<Vec<usize>>() {
        return match task {
            TaskId::NtaEvents => Ok(Units::Events(ids)),
            _ => Ok(Units::Symbols(ids)),
        };
    }
    let frames: Vec<Vec<f64>> = units.extract().map_err(|_| {
        PyValueError::new_err("units must be list[int] or list[list[float]]")
    })?;
    let t = frames.len();
    let flat: Vec<f64> = frames.into_iter().flatten().collect();
    if t == 0 || flat.len() != t * LATENT_DIM {
        return Err(PyValueError::new_err(format!(
            "frame rows must be non-empty with {LATENT_DIM} channels each"
        )));
    }
    let tensor = Tensor::new(&[t, LATENT_DIM], flat).map_err(to_py)?;
    Ok(Units::Frames(tensor))
}

// ── Operations ───────────────────────────────────────────────────────────

/// Sample one clip. `units` is a list of symbol/event ids, or, for the
/// denoise task, the conditioning frames as list[list[float]]. Returns a
/// dict with the latent rows, frame count, durations, and d_c_hat.
#[pyfunction]
#[pyo3(signature = (params, task, units, steps=25, cfg=None, sway=-1.0, seed=0))]
fn generate<'py>(
    py: Python<'py>,
    params: &PyParams,
    task: &str,
    units: &Bound<'py, PyAny>,
    steps: usize,
    cfg: Option<f64>,
    sway: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let task = TaskId::parse(task).map_err(to_py)?;
    let req = GenRequest {
        task,
        units: units_from_py(task, units)?,
        instruction: 0,
        frames: FrameCount::Predicted,
        steps,
        guidance: cfg.unwrap_or_else(|| latentflow::train::eval::default_guidance(task)),
        sway,
        seed,
    };
    let gen = integrate(&params.inner, &req).map_err(to_py)?;
    let out = PyDict::new_bound(py);
    out.set_item("latent", rows(&gen.latent))?;
    out.set_item("frames", gen.frames)?;
    out.set_item("durations", gen.durations)?;
    out.set_item("d_c_hat", gen.d_c_hat)?;
    Ok(out)
}

/// Run the evaluation protocol for one task; returns {metric: value}.
#[pyfunction]
#[pyo3(signature = (params, task, n_samples=8, seed=1234, steps=25, sway=-1.0, cfg=None))]
fn evaluate_task<'py>(
    py: Python<'py>,
    params: &PyParams,
    task: &str,
    n_samples: usize,
    seed: u64,
    steps: usize,
    sway: f64,
    cfg: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let task = TaskId::parse(task).map_err(to_py)?;
    let ec = EvalConfig { n_samples, seed, steps, sway, guidance: cfg };
    let report = evaluate(&params.inner, task, &ec).map_err(to_py)?;
    let out = PyDict::new_bound(py);
    for (name, value) in &report.metrics {
        out.set_item(name, *value)?;
    }
    Ok(out)
}

/// Train from scratch; returns (params, log) where log rows are dicts
/// matching the training CSV columns. `out_dir` additionally writes the
/// final checkpoint there.
#[pyfunction]
#[pyo3(signature = (config, steps, batch_size=16, learning_rate=1e-3, warmup_steps=100,
                    mask_ratio=0.2, seed=7, balanced=true, out_dir=None))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    config: &PyConfig,
    steps: usize,
    batch_size: usize,
    learning_rate: f64,
    warmup_steps: usize,
    mask_ratio: f64,
    seed: u64,
    balanced: bool,
    out_dir: Option<PathBuf>,
) -> PyResult<(PyParams, Vec<Bound<'py, PyDict>>)> {
    let tc = TrainConfig {
        steps,
        batch_size,
        learning_rate,
        warmup_steps,
        mask_ratio,
        seed,
        balanced,
        fusion_mode: config.inner.fusion_mode,
        checkpoint_every: 0,
    };
    let specs = latentflow::tasks::desk_tasks();
    let result = train_with_tasks(&config.inner, &tc, specs, out_dir.as_deref().map(Path::new))
        .map_err(to_py)?;
    let mut log = Vec::with_capacity(result.log.len());
    for row in &result.log {
        let d = PyDict::new_bound(py);
        d.set_item("step", row.step)?;
        d.set_item("total_loss", row.total_loss)?;
        d.set_item("fm_loss", row.fm_loss)?;
        d.set_item("dur_clip_loss", row.dur_clip_loss)?;
        d.set_item("dur_seq_loss", row.dur_seq_loss)?;
        d.set_item("masked_fraction", row.masked_fraction)?;
        log.push(d);
    }
    Ok((PyParams { inner: result.params }, log))
}

/// Finite-difference check of every autodiff primitive. Returns
/// [(op, max_rel_err, passed)]; `tolerance` defaults to the harness value.
#[pyfunction]
#[pyo3(signature = (seeds=2, step_size=1e-5, tolerance=None))]
fn gradcheck_primitives(
    seeds: u64,
    step_size: f64,
    tolerance: Option<f64>,
) -> PyResult<Vec<(String, f64, bool)>> {
    if seeds == 0 {
        return Err(PyValueError::new_err("need at least one seed"));
    }
    let seed_list: Vec<u64> = (1..=seeds).collect();
    let tol = tolerance.unwrap_or(DEFAULT_TOLERANCE);
    let suite = run_primitive_suite(&seed_list, step_size, tol, None).map_err(to_py)?;
    Ok(suite
        .rows
        .into_iter()
        .map(|r| (r.name.to_string(), r.max_rel_err, r.passed))
        .collect())
}

#[pyfunction]
fn task_names() -> Vec<&'static str> {
    TaskId::ALL.iter().map(|t| t.name()).collect()
}

#[pyfunction]
fn fusion_modes() -> Vec<&'static str> {
    FusionMode::ALL.iter().map(|m| m.name()).collect()
}

#[pymodule]
fn latentflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyParams>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_task, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_primitives, m)?)?;
    m.add_function(wrap_pyfunction!(task_names, m)?)?;
    m.add_function(wrap_pyfunction!(fusion_modes, m)?)?;
    m.add("LATENT_DIM", LATENT_DIM)?;
    Ok(())
}
