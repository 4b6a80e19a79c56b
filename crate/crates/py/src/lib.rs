//! Python bindings: the MEC environment, tile maps, split-model accounting,
//! exchange costs and the train/eval pipeline.

use std::path::PathBuf;

use fsdt_core::dt::{compute_rtg, split_counts, DtConfig};
use fsdt_core::env::{EnvConfig, TraceSplit};
use fsdt_core::fed::{fl_cost, fsdt_cost, Algo};
use fsdt_core::gaze::{tile_quality_map, GazePoint, TileQuality, TileRadii};
use fsdt_core::harness::{eval_algo, train_algo, BoxStats, RunConfig, SplitTable};
use fsdt_core::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Shape(_) | Error::Contract(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_split(split: &str) -> PyResult<TraceSplit> {
    match split {
        "train" => Ok(TraceSplit::Train),
        "test" => Ok(TraceSplit::Test),
        _ => Err(PyValueError::new_err(format!("split must be 'train' or 'test', got {split:?}"))),
    }
}

/// Multi-user tiled VR streaming MEC cell for one RAT profile.
#[pyclass(module = "fsdt")]
struct MecEnv {
    inner: fsdt_core::env::MecEnv,
}

#[pymethods]
impl MecEnv {
    #[new]
    #[pyo3(signature = (profile = "UMB/UMi", seed = 0, split = "train"))]
    fn new(profile: &str, seed: u64, split: &str) -> PyResult<Self> {
        let config = EnvConfig::for_profile(profile).map_err(to_py)?;
        let inner = fsdt_core::env::MecEnv::new(config, parse_split(split)?, seed).map_err(to_py)?;
        Ok(MecEnv { inner })
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.config().state_dim()
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.inner.config().action_dim()
    }

    /// Starts an episode and returns the flat observation.
    fn reset(&mut self) -> PyResult<Vec<f64>> {
        Ok(self.inner.reset().map_err(to_py)?.flatten())
    }

    /// Applies a raw action in (0,1)^action_dim; returns (observation, reward, done, info).
    fn step<'py>(&mut self, py: Python<'py>, action: Vec<f64>) -> PyResult<(Vec<f64>, f64, bool, Bound<'py, PyDict>)> {
        let out = self.inner.step(&action).map_err(to_py)?;
        let info = PyDict::new(py);
        info.set_item("qoe", out.users.iter().map(|u| u.qoe).collect::<Vec<_>>())?;
        info.set_item("latency_s", out.users.iter().map(|u| u.latency.total_s).collect::<Vec<_>>())?;
        info.set_item("rate_bps", out.users.iter().map(|u| u.rate_bps).collect::<Vec<_>>())?;
        info.set_item("violations", out.terms.violations)?;
        Ok((out.observation.flatten(), out.reward, out.done, info))
    }
}

/// Quality of each of the 4x4 tiles, indexed [column][row], for a gaze point in [0,1]².
#[pyfunction]
#[pyo3(signature = (x, y, high = 0.8, med = 1.8))]
fn tile_map(x: f64, y: f64, high: f64, med: f64) -> PyResult<Vec<Vec<&'static str>>> {
    let map = tile_quality_map(GazePoint::new(x, y), TileRadii::new(high, med)).map_err(to_py)?;
    Ok(map
        .grid
        .iter()
        .map(|col| {
            col.iter()
                .map(|q| match q {
                    TileQuality::High => "high",
                    TileQuality::Med => "med",
                    TileQuality::Low => "low",
                })
                .collect()
        })
        .collect())
}

/// Undiscounted returns-to-go.
#[pyfunction]
fn returns_to_go(rewards: Vec<f32>) -> Vec<f32> {
    compute_rtg(&rewards)
}

/// Parameter counts of the embedding, decoder and prediction parts.
#[pyfunction]
#[pyo3(signature = (hidden_dim = 256, n_blocks = 6, n_heads = 4, context_len = 50))]
fn param_counts<'py>(
    py: Python<'py>,
    hidden_dim: usize,
    n_blocks: usize,
    n_heads: usize,
    context_len: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = DtConfig { hidden_dim, n_blocks, n_heads, context_len, ..DtConfig::default() };
    cfg.validate().map_err(to_py)?;
    let c = split_counts(&cfg);
    let out = PyDict::new(py);
    out.set_item("embedding", c.embed.params)?;
    out.set_item("decoder", c.decoder.params)?;
    out.set_item("prediction", c.predict.params)?;
    out.set_item("total", c.total())?;
    Ok(out)
}

/// Rendered split table of the default model.
#[pyfunction]
fn split_table() -> String {
    SplitTable::new(&DtConfig::default()).render()
}

/// Scalars exchanged by full-model federated learning over `rounds`.
#[pyfunction]
fn fl_exchange(rounds: usize, p_tot: usize) -> u64 {
    fl_cost(rounds, p_tot)
}

/// Scalars one client exchanges in split training.
#[pyfunction]
fn split_exchange(rounds: usize, p_local: usize, split_batches: u64, features: u64, gradients: u64) -> u64 {
    fsdt_cost(rounds, p_local, split_batches, features, gradients)
}

/// Type-7 quartiles, 1.5 IQR whiskers and mean.
#[pyfunction]
fn box_stats<'py>(py: Python<'py>, samples: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let b = BoxStats::from_samples(&samples).ok_or_else(|| PyValueError::new_err("need finite, nonempty samples"))?;
    let out = PyDict::new(py);
    for (k, v) in [
        ("median", b.median),
        ("q1", b.q1),
        ("q3", b.q3),
        ("whisker_low", b.whisker_low),
        ("whisker_high", b.whisker_high),
        ("mean", b.mean),
    ] {
        out.set_item(k, v)?;
    }
    Ok(out)
}

fn run_config(config: Option<PathBuf>, out: Option<PathBuf>) -> PyResult<RunConfig> {
    let mut run = match config {
        Some(p) => RunConfig::load(&p).map_err(to_py)?,
        None => RunConfig::default(),
    };
    if let Some(out) = out {
        run.out = out;
    }
    run.validate().map_err(to_py)?;
    Ok(run)
}

/// Trains `algo` ("fsdt", "cdt" or "fdt") for one seed and writes the run
/// outputs. Returns the mean held-out loss per round.
#[pyfunction]
#[pyo3(signature = (algo, seed = 0, config = None, out = None))]
fn train(py: Python<'_>, algo: &str, seed: u64, config: Option<PathBuf>, out: Option<PathBuf>) -> PyResult<Vec<f64>> {
    let algo: Algo = algo.parse().map_err(to_py)?;
    let run = run_config(config, out)?;
    let outcome = py.detach(|| train_algo(&run, algo, seed)).map_err(to_py)?;
    Ok(outcome.heldout_curve())
}

/// Evaluates a trained method for one seed; returns the episode returns.
#[pyfunction]
#[pyo3(signature = (algo, seed = 0, config = None, out = None))]
fn evaluate(
    py: Python<'_>,
    algo: &str,
    seed: u64,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
) -> PyResult<Vec<f64>> {
    let algo: Algo = algo.parse().map_err(to_py)?;
    let run = run_config(config, out)?;
    let record = py.detach(|| eval_algo(&run, algo, seed)).map_err(to_py)?;
    Ok(record.episodes.iter().map(|e| e.episode_return).collect())
}

#[pymodule]
fn fsdt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<MecEnv>()?;
    m.add_function(wrap_pyfunction!(tile_map, m)?)?;
    m.add_function(wrap_pyfunction!(returns_to_go, m)?)?;
    m.add_function(wrap_pyfunction!(param_counts, m)?)?;
    m.add_function(wrap_pyfunction!(split_table, m)?)?;
    m.add_function(wrap_pyfunction!(fl_exchange, m)?)?;
    m.add_function(wrap_pyfunction!(split_exchange, m)?)?;
    m.add_function(wrap_pyfunction!(box_stats, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
