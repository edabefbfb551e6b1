//! Python bindings. Matrices cross the boundary as lists of rows; missing
//! readings are `nan`.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use dirinet::autoencoder::{load_checkpoint, save_checkpoint};
use dirinet::data::{generate_synthetic, load_speed_csv, write_speed_csv};
use dirinet::evaluation::metrics as score;
use dirinet::experiment::{dgae_series, hide_virtual, train_dgae};
use dirinet::graph::{build_adjacency, transition_coupled, transition_decoupled, DistanceRecord, Sigma};
use dirinet::propagation::{propagate_closed_form, propagate_decoupled, run as propagate_run};
use dirinet::{
    Error, InitPolicy, ModelConfig, ModelParams, NodePartition, PropagationConfig, PropagationMode, SpeedSeries,
    SynthConfig, TrainConfig, WeightedDigraph,
};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows differ in length"));
    }
    let nrows = rows.len();
    Array2::from_shape_vec((nrows, ncols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn init_policy(name: &str, seed: u64) -> PyResult<InitPolicy> {
    match name {
        "zeros" => Ok(InitPolicy::Zeros),
        "observed_mean" => Ok(InitPolicy::ObservedMean),
        "random" => Ok(InitPolicy::Random(seed)),
        other => Err(PyValueError::new_err(format!("unknown init policy `{other}`"))),
    }
}

/// Directed sensor graph.
#[pyclass(name = "Graph", frozen)]
struct PyGraph {
    inner: WeightedDigraph,
}

#[pymethods]
impl PyGraph {
    /// Gaussian-kernel graph from `(from, to, meters)` routes. `sigma=None`
    /// uses the distance standard deviation; `kappa` drops longer routes.
    #[staticmethod]
    #[pyo3(signature = (node_ids, distances, sigma=None, kappa=None))]
    fn build(
        node_ids: Vec<String>,
        distances: Vec<(String, String, f64)>,
        sigma: Option<f64>,
        kappa: Option<f64>,
    ) -> PyResult<Self> {
        let records: Vec<DistanceRecord> = distances
            .into_iter()
            .map(|(from, to, dist)| DistanceRecord { from, to, dist })
            .collect();
        let sigma = sigma.map_or(Sigma::Auto, Sigma::Value);
        let inner = build_adjacency(&node_ids, &records, sigma, kappa).map_err(py_err)?;
        Ok(PyGraph { inner })
    }

    #[staticmethod]
    fn from_edges(n: usize, edges: Vec<(usize, usize, f64)>) -> PyResult<Self> {
        Ok(PyGraph {
            inner: WeightedDigraph::from_edges(n, &edges).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyGraph {
            inner: WeightedDigraph::load_json(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_json(&path).map_err(py_err)
    }

    #[getter]
    fn node_ids(&self) -> Vec<String> {
        self.inner.node_ids().to_vec()
    }

    #[getter]
    fn edge_count(&self) -> usize {
        self.inner.edge_count()
    }

    #[getter]
    fn sigma(&self) -> Option<f64> {
        self.inner.sigma()
    }

    fn adjacency(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.adjacency().to_dense())
    }

    /// Transition matrix: `coupled`, `congestion` or `free_flow`.
    fn transition(&self, kind: &str) -> PyResult<Vec<Vec<f64>>> {
        let t = match kind {
            "coupled" => transition_coupled(&self.inner),
            "congestion" => transition_decoupled(&self.inner).0,
            "free_flow" => transition_decoupled(&self.inner).1,
            other => return Err(PyValueError::new_err(format!("unknown transition `{other}`"))),
        };
        Ok(rows(&t.matrix.to_dense()))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Graph(nodes={}, edges={})", self.inner.len(), self.inner.edge_count())
    }
}

/// Speed readings on a 5-minute grid, `T × N` in mph.
#[pyclass(name = "SpeedSeries", frozen)]
struct PySpeedSeries {
    inner: SpeedSeries,
}

#[pymethods]
impl PySpeedSeries {
    #[new]
    fn new(node_ids: Vec<String>, timestamps: Vec<i64>, values: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(PySpeedSeries {
            inner: SpeedSeries::new(node_ids, timestamps, matrix(values)?).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load_csv(path: PathBuf) -> PyResult<Self> {
        Ok(PySpeedSeries {
            inner: load_speed_csv(&path).map_err(py_err)?,
        })
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        write_speed_csv(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn node_ids(&self) -> Vec<String> {
        self.inner.node_ids.clone()
    }

    #[getter]
    fn timestamps(&self) -> Vec<i64> {
        self.inner.timestamps.clone()
    }

    #[getter]
    fn values(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.values)
    }

    #[getter]
    fn missing_rate(&self) -> f64 {
        self.inner.missing_rate()
    }

    /// Columns reordered to `node_ids`.
    fn select_nodes(&self, node_ids: Vec<String>) -> PyResult<Self> {
        Ok(PySpeedSeries {
            inner: self.inner.select_nodes(&node_ids).map_err(py_err)?,
        })
    }

    fn slice_time(&self, start: usize, end: usize) -> PyResult<Self> {
        if start >= end || end > self.inner.len() {
            return Err(PyValueError::new_err("slice out of range"));
        }
        Ok(PySpeedSeries {
            inner: self.inner.slice_time(start, end),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("SpeedSeries(steps={}, nodes={})", self.inner.len(), self.inner.n_nodes())
    }
}

/// Trained graph auto-encoder.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    /// Trains on `series` using only the `available` node indices. Keyword
    /// arguments override the default architecture and optimiser settings.
    #[staticmethod]
    #[pyo3(signature = (graph, series, available, hidden=None, latent=None, max_epochs=None, learning_rate=None, patience=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        graph: &PyGraph,
        series: &PySpeedSeries,
        available: Vec<usize>,
        hidden: Option<usize>,
        latent: Option<usize>,
        max_epochs: Option<usize>,
        learning_rate: Option<f64>,
        patience: Option<usize>,
        seed: u64,
    ) -> PyResult<Self> {
        let mut model = ModelConfig::default();
        model.hidden = hidden.unwrap_or(model.hidden);
        model.latent = latent.unwrap_or(model.latent);
        let mut cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        cfg.max_epochs = max_epochs.unwrap_or(cfg.max_epochs);
        cfg.learning_rate = learning_rate.unwrap_or(cfg.learning_rate);
        cfg.patience = patience.unwrap_or(cfg.patience);
        let mut available = available;
        available.sort_unstable();
        available.dedup();
        let visible = hide_virtual(&series.inner, &available);
        let fit = train_dgae(&model, &graph.inner, &visible, &available, &cfg).map_err(py_err)?;
        Ok(PyModel { inner: fit.params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_checkpoint(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(py_err)
    }

    /// `T × N` estimates reading only the `available` columns.
    fn estimate(&self, graph: &PyGraph, series: &PySpeedSeries, available: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let mut available = available;
        available.sort_unstable();
        available.dedup();
        let visible = hide_virtual(&series.inner, &available);
        let est = dgae_series(&self.inner, &graph.inner, &visible, &available).map_err(py_err)?;
        Ok(rows(&est))
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }
}

/// Propagates `values` (one per observed node, in `observed` order sorted
/// ascending) to every node. Returns the full signal and the sweep count.
#[pyfunction]
#[pyo3(signature = (graph, observed, values, max_iters=90, tol=1e-6, init="observed_mean", seed=0))]
fn propagate(
    graph: &PyGraph,
    observed: Vec<usize>,
    values: Vec<f64>,
    max_iters: usize,
    tol: f64,
    init: &str,
    seed: u64,
) -> PyResult<(Vec<f64>, usize)> {
    let part = NodePartition::new(graph.inner.len(), &observed).map_err(py_err)?;
    let cfg = PropagationConfig {
        max_iters,
        tolerance: tol,
        init: init_policy(init, seed)?,
        ..Default::default()
    };
    propagate_run(&graph.inner, &part, &values, &cfg).map_err(py_err)
}

/// Exact energy minimiser with the observed values fixed.
#[pyfunction]
fn propagate_exact(graph: &PyGraph, observed: Vec<usize>, values: Vec<f64>) -> PyResult<Vec<f64>> {
    let part = NodePartition::new(graph.inner.len(), &observed).map_err(py_err)?;
    propagate_closed_form(&graph.inner, &part, &values).map_err(py_err)
}

/// Decoupled propagation against per-node reference speeds. Returns
/// `(speeds, congestion_deficit, free_flow, sweeps)`.
#[pyfunction]
#[pyo3(signature = (graph, observed, values, reference_speed, max_iters=90, tol=1e-6))]
fn propagate_split(
    graph: &PyGraph,
    observed: Vec<usize>,
    values: Vec<f64>,
    reference_speed: Vec<f64>,
    max_iters: usize,
    tol: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>, usize)> {
    let part = NodePartition::new(graph.inner.len(), &observed).map_err(py_err)?;
    let cfg = PropagationConfig {
        max_iters,
        tolerance: tol,
        mode: PropagationMode::Decoupled,
        reference_speed: Some(reference_speed),
        ..Default::default()
    };
    let r = propagate_decoupled(&graph.inner, &part, &values, &cfg).map_err(py_err)?;
    Ok((r.values, r.congestion, r.free_flow, r.iterations))
}

/// MAPE (%), MAE and RMSE over entries where `truth` is not `nan`.
#[pyfunction]
fn metrics(estimates: Vec<Vec<f64>>, truth: Vec<Vec<f64>>) -> PyResult<(f64, f64, f64)> {
    let est = matrix(estimates)?;
    let tr = matrix(truth)?;
    let valid = tr.mapv(f64::is_finite);
    let r = score(est.view(), tr.view(), valid.view()).map_err(py_err)?;
    Ok((r.mape, r.mae, r.rmse))
}

/// Synthetic corridor: `(observed, truth, distances)` with distances as
/// `(from, to, meters)`.
#[pyfunction]
#[pyo3(signature = (n_nodes=60, days=20, seed=0))]
fn synthesize(n_nodes: usize, days: usize, seed: u64) -> PyResult<(PySpeedSeries, PySpeedSeries, Vec<(String, String, f64)>)> {
    let d = generate_synthetic(&SynthConfig {
        n_nodes,
        days,
        seed,
        ..SynthConfig::default()
    })
    .map_err(py_err)?;
    let dist = d.distances.into_iter().map(|r| (r.from, r.to, r.dist)).collect();
    Ok((PySpeedSeries { inner: d.observed }, PySpeedSeries { inner: d.truth }, dist))
}

#[pymodule]
fn pydirinet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PySpeedSeries>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(propagate, m)?)?;
    m.add_function(wrap_pyfunction!(propagate_exact, m)?)?;
    m.add_function(wrap_pyfunction!(propagate_split, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    Ok(())
}
