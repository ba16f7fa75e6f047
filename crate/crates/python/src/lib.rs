//! Python bindings: environments, style statistics, config resolution,
//! training, and evaluation. Structured results are returned as JSON text.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sar_core::agents;
use sar_core::cli::{self, CliError};
use sar_core::envs::{self, Action, StylePool};
use sar_core::harness::{self, HarnessError, RunConfig};
use sar_core::style;
use sar_core::tensor::{Tape, Tensor};

fn harness_err(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Config(_) | HarnessError::Invalid(_) => PyValueError::new_err(e.to_string()),
        HarnessError::MissingArtifact(_) | HarnessError::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Missing(_) => PyIOError::new_err(e.to_string()),
        CliError::Other(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(&shape, data).map_err(value_err)
}

fn parse_config(config_json: &str) -> PyResult<(serde_json::Value, RunConfig)> {
    let input: serde_json::Value = serde_json::from_str(config_json).map_err(value_err)?;
    let cfg = cli::resolve(&input).map_err(cli_err)?;
    Ok((input, cfg))
}

/// A styled environment instance.
#[pyclass(unsendable, name = "Env")]
struct PyEnv {
    inner: Box<dyn envs::Env>,
    id: String,
}

#[pymethods]
impl PyEnv {
    #[new]
    fn new(env_id: &str) -> PyResult<Self> {
        Ok(Self {
            inner: envs::make(env_id).map_err(value_err)?,
            id: env_id.to_string(),
        })
    }

    #[getter]
    fn id(&self) -> &str {
        &self.id
    }

    #[getter]
    fn obs_shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.inner.spec().shape;
        (c, h, w)
    }

    /// Flat `C·H·W` observation.
    fn reset(&mut self, layout_seed: u64, style_id: u64) -> PyResult<Vec<f64>> {
        self.inner.reset(layout_seed, style_id).map_err(value_err)
    }

    /// Takes an int for discrete spaces or a list of floats for continuous
    /// ones; returns `(obs, reward, done)`.
    fn step(&mut self, action: &Bound<'_, PyAny>) -> PyResult<(Vec<f64>, f64, bool)> {
        let a = if let Ok(i) = action.extract::<usize>() {
            Action::Discrete(i)
        } else {
            Action::Continuous(action.extract::<Vec<f64>>()?)
        };
        let s = self.inner.step(&a).map_err(value_err)?;
        Ok((s.obs, s.reward, s.done))
    }

    fn optimal_return(&self) -> Option<f64> {
        self.inner.optimal_return()
    }
}

/// Per-sample, per-channel `(mean, std)` of a `B×C×H×W` map, each `B·C` long.
#[pyfunction]
fn channel_stats(data: Vec<f64>, shape: Vec<usize>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let (mu, sigma) = style::stats_of(&tensor(data, shape)?).map_err(value_err)?;
    Ok((mu.data().to_vec(), sigma.data().to_vec()))
}

/// Re-styles `content` with the channel statistics of `source`.
#[pyfunction]
fn adain(content: Vec<f64>, source: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<f64>> {
    let mut tape = Tape::new();
    let z = tape.constant(tensor(content, shape.clone())?);
    let s = tape.constant(tensor(source, shape)?);
    let out = style::adain(&mut tape, z, s).map_err(value_err)?;
    Ok(tape.value(out).data().to_vec())
}

#[pyfunction]
fn instance_normalize(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<f64>> {
    let mut tape = Tape::new();
    let z = tape.constant(tensor(data, shape)?);
    let out = style::normalize_content(&mut tape, z).map_err(value_err)?;
    Ok(tape.value(out).data().to_vec())
}

/// `(advantages, value_targets)` for one trajectory.
#[pyfunction]
#[pyo3(signature = (rewards, values, dones, bootstrap, gamma=0.999, lam=0.95))]
fn gae(
    rewards: Vec<f64>,
    values: Vec<f64>,
    dones: Vec<bool>,
    bootstrap: f64,
    gamma: f64,
    lam: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    agents::gae(&rewards, &values, &dones, bootstrap, gamma, lam).map_err(value_err)
}

#[pyfunction]
fn ema(xs: Vec<f64>, c: f64) -> Vec<f64> {
    cli::plot::ema(&xs, c)
}

/// Resolved config with defaults filled in, as JSON.
#[pyfunction]
fn resolve_config(config_json: &str) -> PyResult<String> {
    let (_, cfg) = parse_config(config_json)?;
    serde_json::to_string(&cfg).map_err(value_err)
}

#[pyfunction]
fn config_hash(config_json: &str) -> PyResult<String> {
    Ok(parse_config(config_json)?.1.hash())
}

/// Trains into `run_dir` and returns the final eval.json contents.
#[pyfunction]
fn train(py: Python<'_>, config_json: &str, run_dir: PathBuf) -> PyResult<String> {
    let (input, cfg) = parse_config(config_json)?;
    py.detach(|| harness::train(&cfg, &input, &run_dir)).map_err(harness_err)?;
    let file = harness::read_eval(&run_dir).map_err(harness_err)?;
    serde_json::to_string(&file).map_err(value_err)
}

/// Evaluates the latest checkpoint of `run_dir` on `pool` ("train" or
/// "test") and returns the summary as JSON.
#[pyfunction]
#[pyo3(signature = (run_dir, pool="test", episodes=None, seed=None))]
fn evaluate(py: Python<'_>, run_dir: PathBuf, pool: &str, episodes: Option<usize>, seed: Option<u64>) -> PyResult<String> {
    let pool = match pool {
        "train" => cli::PoolArg::Train,
        "test" => cli::PoolArg::Test,
        other => return Err(PyValueError::new_err(format!("unknown pool {other:?}"))),
    };
    let args = cli::EvalArgs {
        run_dir,
        pool,
        episodes,
        seed,
    };
    let s = py.detach(|| cli::cmd_eval(&args)).map_err(cli_err)?;
    serde_json::to_string(&s).map_err(value_err)
}

/// Cross-style over cross-state distance of a run's branch embeddings.
#[pyfunction]
#[pyo3(signature = (run_dir, states=8, styles=8))]
fn style_gap(run_dir: PathBuf, states: u64, styles: u64) -> PyResult<String> {
    let g = cli::cmd_analyze(&cli::AnalyzeArgs { run_dir, states, styles }).map_err(cli_err)?;
    serde_json::to_string(&g).map_err(value_err)
}

/// Ranked seed-aggregated report over run directories, as JSON.
#[pyfunction]
fn compare(run_dirs: Vec<PathBuf>) -> PyResult<String> {
    let r = cli::compare::compare(&run_dirs).map_err(cli_err)?;
    serde_json::to_string(&r).map_err(value_err)
}

#[pyfunction]
fn env_ids() -> Vec<&'static str> {
    envs::ENV_IDS.to_vec()
}

#[pyfunction]
fn style_pool(name: &str) -> PyResult<Vec<u64>> {
    match name {
        "train" => Ok(StylePool::Train.ids().collect()),
        "test" => Ok(StylePool::Test.ids().collect()),
        other => Err(PyValueError::new_err(format!("unknown pool {other:?}"))),
    }
}

#[pymodule]
fn sar_rl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnv>()?;
    m.add_function(wrap_pyfunction!(channel_stats, m)?)?;
    m.add_function(wrap_pyfunction!(adain, m)?)?;
    m.add_function(wrap_pyfunction!(instance_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(gae, m)?)?;
    m.add_function(wrap_pyfunction!(ema, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(style_gap, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(env_ids, m)?)?;
    m.add_function(wrap_pyfunction!(style_pool, m)?)?;
    Ok(())
}
