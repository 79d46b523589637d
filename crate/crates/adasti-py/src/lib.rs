//! Python bindings: configuration, training, checkpoints, imputation,
//! baselines, masks, and metrics over plain nested lists.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use ndarray::Array2;

use adasti::baseline;
use adasti::checkpoint::Checkpoint;
use adasti::config::ExperimentConfig;
use adasti::data::{generate_block_mask, generate_random_mask, MaskedSample, NormStats};
use adasti::diffusion::impute;
use adasti::metrics;
use adasti::synth::ring_graph;
use adasti::train;

fn err(e: adasti::AdastiError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let l = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != l) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(Array2::from_shape_fn((n, l), |(i, j)| rows[i][j]))
}

fn to_mask(rows: Vec<Vec<u8>>) -> PyResult<Array2<u8>> {
    let n = rows.len();
    let l = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != l) {
        return Err(PyValueError::new_err("ragged mask"));
    }
    if rows.iter().flatten().any(|&v| v > 1) {
        return Err(PyValueError::new_err("mask entries must be 0 or 1"));
    }
    Ok(Array2::from_shape_fn((n, l), |(i, j)| rows[i][j]))
}

fn from_array(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Flat key=value experiment configuration.
#[pyclass(name = "Config")]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text=None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => ExperimentConfig::parse(t).map_err(err)?,
            None => ExperimentConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn to_text(&self) -> String {
        self.inner.canonical()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }
}

/// A trained model: checkpoint state plus imputation entry points.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel { inner: Checkpoint::load(std::path::Path::new(path)).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(std::path::Path::new(path)).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig { inner: self.inner.config.clone() }
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn best_val_mae(&self) -> f64 {
        self.inner.best_val_mae
    }

    /// Median-of-k imputation of one window. `x` is nodes x timestamps with
    /// missing cells holding any value, `m` the 0/1 observation mask; both in
    /// normalized units. Observed entries pass through unchanged.
    #[pyo3(signature = (x, m, k=None, seed=0))]
    fn impute(
        &self,
        x: Vec<Vec<f64>>,
        m: Vec<Vec<u8>>,
        k: Option<usize>,
        seed: u64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let m = to_mask(m)?;
        let x_raw = to_array(x)?;
        if x_raw.dim() != m.dim() {
            return Err(PyValueError::new_err("x and m shapes differ"));
        }
        let n = x_raw.nrows();
        let x = Array2::from_shape_fn(x_raw.dim(), |ix| if m[ix] == 1 { x_raw[ix] } else { 0.0 });
        let sample = MaskedSample {
            x,
            m,
            norm_stats: NormStats { mean: vec![0.0; n], std: vec![1.0; n] },
        };
        let cfg = &self.inner.config;
        let a_hat = train::a_hat_for(cfg, self.inner.n_nodes).map_err(err)?;
        let sched = cfg.schedule().map_err(err)?;
        let model = self.inner.model();
        let result = impute(
            &model,
            &sample,
            &a_hat,
            &sched,
            k.unwrap_or(cfg.k),
            seed,
            cfg.literal_reverse_coeffs,
        )
        .map_err(err)?;
        Ok(from_array(&result.median))
    }
}

/// Train a model; returns the best-validation checkpoint as a `Model`.
#[pyfunction]
fn train_model(config: &PyConfig) -> PyResult<PyModel> {
    let outcome = train::train(&config.inner).map_err(err)?;
    Ok(PyModel { inner: outcome.checkpoint })
}

/// Score a trained model on the held-out test windows of its experiment;
/// returns the metrics report as key=value text.
#[pyfunction]
#[pyo3(signature = (model, k=None))]
fn evaluate_model(model: &PyModel, k: Option<usize>) -> PyResult<String> {
    let report = train::evaluate_checkpoint(&model.inner, k).map_err(err)?;
    Ok(report.to_text())
}

/// Node-mean fill of missing entries.
#[pyfunction]
fn baseline_mean(x: Vec<Vec<f64>>, m: Vec<Vec<u8>>) -> PyResult<Vec<Vec<f64>>> {
    let (x, m) = (to_array(x)?, to_mask(m)?);
    Ok(from_array(&baseline::baseline_mean(&x, &m)))
}

/// Temporal linear interpolation fill of missing entries.
#[pyfunction]
fn baseline_tli(x: Vec<Vec<f64>>, m: Vec<Vec<u8>>) -> PyResult<Vec<Vec<f64>>> {
    let (x, m) = (to_array(x)?, to_mask(m)?);
    Ok(from_array(&baseline::baseline_tli(&x, &m)))
}

/// (MAE, RMSE) over entries where `mask` is 1.
#[pyfunction]
fn masked_metrics(
    pred: Vec<Vec<f64>>,
    truth: Vec<Vec<f64>>,
    mask: Vec<Vec<u8>>,
) -> PyResult<(f64, f64)> {
    metrics::masked_metrics(&to_array(pred)?, &to_array(truth)?, &to_mask(mask)?).map_err(err)
}

/// MCAR mask with independent per-entry missing probability `rate`.
#[pyfunction]
fn random_mask(nodes: usize, len: usize, rate: f64, seed: u64) -> PyResult<Vec<Vec<u8>>> {
    let m = generate_random_mask((nodes, len), rate, seed).map_err(err)?;
    Ok(m.rows().into_iter().map(|r| r.to_vec()).collect())
}

/// Block mask over a ring graph: contiguous runs over neighboring nodes.
#[pyfunction]
fn block_mask(
    nodes: usize,
    len: usize,
    rate: f64,
    n_v: usize,
    n_t: usize,
    seed: u64,
) -> PyResult<Vec<Vec<u8>>> {
    let graph = ring_graph(nodes);
    let m = generate_block_mask((nodes, len), rate, n_v, n_t, &graph, seed).map_err(err)?;
    Ok(m.rows().into_iter().map(|r| r.to_vec()).collect())
}

#[pymodule]
fn adasti_py(m: &Bound<PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_model, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_mean, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_tli, m)?)?;
    m.add_function(wrap_pyfunction!(masked_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(random_mask, m)?)?;
    m.add_function(wrap_pyfunction!(block_mask, m)?)?;
    Ok(())
}
