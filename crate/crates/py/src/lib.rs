//! Python bindings: environment, datasets, experiment configs, runs and
//! sweeps, and the standalone diagnostics.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use ::lipvi::diagnostics::{self, DiagnosticsRecord};
use ::lipvi::diffcore::checkpoint::Checkpoint;
use ::lipvi::diffcore::Matrix;
use ::lipvi::dynamics::{model_mse, DynamicsModel};
use ::lipvi::env::{self, PendulumState, TransitionDataset};
use ::lipvi::harness;
use ::lipvi::value::ActorCritic;

fn py_err(e: ::lipvi::Error) -> PyErr {
    match e {
        ::lipvi::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for ::lipvi::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn state_of(s: &[f64]) -> PyResult<PendulumState> {
    if s.len() != env::STATE_DIM {
        return Err(PyValueError::new_err(format!(
            "state must have {} entries, got {}",
            env::STATE_DIM,
            s.len()
        )));
    }
    Ok(PendulumState::from_slice(s))
}

/// The cart-pole with default physical constants.
#[pyclass(name = "CartPole", skip_from_py_object)]
#[derive(Clone, Default)]
struct PyCartPole {
    inner: env::CartPole,
}

#[pymethods]
impl PyCartPole {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    fn reset(&self, seed: u64) -> Vec<f64> {
        self.inner.reset(seed).to_array().to_vec()
    }

    /// Returns `(next_state, reward, failed)`.
    fn step(&self, state: Vec<f64>, action: f64) -> PyResult<(Vec<f64>, f64, bool)> {
        let st = self.inner.step(&state_of(&state)?, action).py()?;
        Ok((st.next_state.to_array().to_vec(), st.reward, st.failed))
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }
}

#[pyclass(name = "Dataset", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: TransitionDataset,
}

#[pymethods]
impl PyDataset {
    /// Uniform-random transitions from the default cart-pole.
    #[staticmethod]
    fn collect(size: usize, seed: u64) -> PyResult<Self> {
        let inner = env::collect_dataset(&env::CartPole::default(), env::Behavior::UniformRandom, size, seed).py()?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: TransitionDataset::load_csv(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_csv(&path).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Rows `(state, action, reward, next_state, terminal)`.
    fn rows(&self) -> Vec<(Vec<f64>, f64, f64, Vec<f64>, bool)> {
        self.inner
            .iter()
            .map(|t| {
                (
                    t.state.to_array().to_vec(),
                    t.action,
                    t.reward,
                    t.next_state.to_array().to_vec(),
                    t.is_terminal(),
                )
            })
            .collect()
    }
}

/// Flat `key = value` experiment configuration.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: harness::ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => harness::ExperimentConfig::parse(t).py()?,
            None => harness::ExperimentConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: harness::ExperimentConfig::from_file(&path).py()?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).py()
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).py()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py()
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        harness::KEYS.to_vec()
    }
}

fn record_dict(r: &DiagnosticsRecord) -> HashMap<&'static str, f64> {
    HashMap::from([
        ("iteration", r.iteration as f64),
        ("eval_return_mean", r.eval_return_mean),
        ("eval_return_best", r.eval_return_best),
        ("regression_error", r.regression_error),
        ("vame", r.vame),
        ("lip_upper_bound", r.lip_upper_bound),
        ("local_lipschitz_estimate", r.local_lipschitz_estimate),
        ("model_mse", r.model_mse),
        ("wall_time_s", r.wall_time_s),
    ])
}

#[pyclass(name = "RunResult", skip_from_py_object)]
struct PyRunResult {
    inner: harness::RunResult,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn sweep_value(&self) -> Option<String> {
        self.inner.sweep_value.clone()
    }

    #[getter]
    fn model_holdout_mse(&self) -> Option<f64> {
        self.inner.model_holdout_mse
    }

    fn summary(&self) -> HashMap<&'static str, f64> {
        let s = &self.inner.summary;
        HashMap::from([
            ("iterations", s.iterations as f64),
            ("best_return", s.best_return),
            ("max_regression_error", s.max_regression_error),
            ("max_vame", s.max_vame),
            ("final_lip_bound", s.final_lip_bound),
        ])
    }

    fn trace(&self) -> Vec<HashMap<&'static str, f64>> {
        self.inner.trace.iter().map(record_dict).collect()
    }

    /// The trace as CSV text, header included.
    fn trace_csv(&self) -> String {
        let mut s = format!("{}\n", diagnostics::TRACE_HEADER);
        for r in &self.inner.trace {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    fn __len__(&self) -> usize {
        self.inner.trace.len()
    }
}

/// One seeded run; written under `out` when given.
#[pyfunction]
#[pyo3(signature = (config, seed, out = None))]
fn run_single(py: Python<'_>, config: &PyConfig, seed: u64, out: Option<PathBuf>) -> PyResult<PyRunResult> {
    let cfg = config.inner.clone();
    let inner = py.detach(move || harness::run_single(&cfg, seed, out.as_deref())).py()?;
    Ok(PyRunResult { inner })
}

/// Every sweep value crossed with every seed of `config`.
#[pyfunction]
#[pyo3(signature = (config, persist = false))]
fn run_sweep(py: Python<'_>, config: &PyConfig, persist: bool) -> PyResult<Vec<PyRunResult>> {
    let cfg = config.inner.clone();
    let results = py.detach(move || harness::run_sweep(&cfg, persist)).py()?;
    Ok(results.into_iter().map(|inner| PyRunResult { inner }).collect())
}

/// Writes traces, `summary.csv` and `manifest.json`; returns the summary
/// rows as `(sweep_value, median_best_return, median_max_regression_error,
/// median_max_vame, median_lip_bound)`.
#[pyfunction]
fn emit_report(
    results: Vec<PyRef<'_, PyRunResult>>,
    dir: PathBuf,
) -> PyResult<Vec<(String, f64, f64, f64, f64)>> {
    let owned: Vec<harness::RunResult> = results.iter().map(|r| r.inner.clone()).collect();
    let rows = harness::emit_report(&owned, &dir).py()?;
    Ok(rows
        .into_iter()
        .map(|r| {
            (
                r.sweep_value,
                r.median_best_return,
                r.median_max_regression_error,
                r.median_max_vame,
                r.median_lip_bound,
            )
        })
        .collect())
}

/// Largest singular value of a row-major matrix.
#[pyfunction]
fn spectral_norm(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    let m = Matrix::from_rows(&rows).py()?;
    Ok(diagnostics::spectral_norm(&m))
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> Option<f64> {
    harness::spearman(&x, &y)
}

#[pyfunction]
fn median(values: Vec<f64>) -> Option<f64> {
    harness::median(&values)
}

/// Diagnostics of saved agent and model checkpoints on a dataset.
#[pyfunction]
#[pyo3(signature = (agent, model, data, gamma = 0.99, noise_samples = 1, seed = 0, epsilon = 0.1, pairs = 8))]
#[allow(clippy::too_many_arguments)]
fn diagnose(
    agent: PathBuf,
    model: PathBuf,
    data: &PyDataset,
    gamma: f64,
    noise_samples: usize,
    seed: u64,
    epsilon: f64,
    pairs: usize,
) -> PyResult<HashMap<&'static str, f64>> {
    let ck = Checkpoint::load(&agent).py()?;
    if ck.kind != "agent" || ck.nets.len() != 2 {
        return Err(PyValueError::new_err("not an agent checkpoint"));
    }
    let (q, policy) = (&ck.nets[0], &ck.nets[1]);
    let model = DynamicsModel::from_checkpoint(Checkpoint::load(&model).py()?).py()?;
    let ac = ActorCritic::new(q, policy).py()?;
    let states = data.inner.to_batch().states;
    let check = diagnostics::theorem2_bound_check(&ac, &model, &data.inner, gamma, noise_samples, seed).py()?;
    Ok(HashMap::from([
        ("lip_upper_bound", diagnostics::lipschitz_upper_bound(q)),
        ("value_lip_bound", diagnostics::value_lipschitz_bound(&ac)),
        (
            "local_lipschitz_estimate",
            diagnostics::local_lipschitz_estimate(&ac, &states, epsilon, pairs, seed).py()?,
        ),
        (
            "vame",
            diagnostics::value_aware_model_error(&ac, &model, &data.inner, gamma, noise_samples, seed).py()?,
        ),
        ("model_mse", model_mse(&model, &data.inner, noise_samples, seed).py()?),
        ("bound", check.bound),
        ("bound_holds", if check.holds { 1.0 } else { 0.0 }),
    ]))
}

#[pymodule]
fn lipvi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCartPole>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(run_single, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(emit_report, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_norm, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(median, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
