//! Python bindings for `sgdlab-core`.
//!
//! Structured results (reports, records metadata) cross the boundary as
//! plain dicts built from their JSON form.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use sgdlab_core::analysis;
use sgdlab_core::data::{self, DatasetInstance};
use sgdlab_core::harness::{self, GridConfig, GridOptions, ResultStore};
use sgdlab_core::model::{InitMode, ModelSpec, WeightVector};
use sgdlab_core::privacy::{self, PrivacyParams};
use sgdlab_core::rng::{derive_stream, TAG_NOISE};
use sgdlab_core::stats;
use sgdlab_core::theory::{self, BoundInputs};
use sgdlab_core::train::{self, ExperimentRecord, TrainConfig};

create_exception!(sgdlab, SgdlabError, PyException);

fn err(e: sgdlab_core::Error) -> PyErr {
    SgdlabError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| SgdlabError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn mode(s: &str) -> PyResult<InitMode> {
    s.parse().map_err(err)
}

#[pyclass(name = "Dataset", module = "sgdlab", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: DatasetInstance,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (features, labels, source_id = "data"))]
    fn new(features: Vec<Vec<f64>>, labels: Vec<u8>, source_id: &str) -> PyResult<Self> {
        let d = features.first().map_or(0, Vec::len);
        if features.iter().any(|r| r.len() != d) {
            return Err(SgdlabError::new_err("feature rows must have equal length"));
        }
        let n = features.len();
        let flat: Vec<f64> = features.into_iter().flatten().collect();
        let x = ndarray::Array2::from_shape_vec((n, d), flat).map_err(|e| SgdlabError::new_err(e.to_string()))?;
        Ok(Self {
            inner: DatasetInstance::new(x, labels, source_id).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (n, d, separation = 1.0, seed = 0))]
    fn synthetic(n: usize, d: usize, separation: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: data::generate_synthetic(n, d, separation, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, label_column = "label"))]
    fn load_csv(path: PathBuf, label_column: &str) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_csv(path, label_column).map_err(err)?,
        })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        data::write_csv(&self.inner, path).map_err(err)
    }

    /// Scales every row so the largest row norm is 1.
    fn normalized(&self) -> PyResult<Self> {
        Ok(Self {
            inner: data::normalize_max_norm(&self.inner).map_err(err)?,
        })
    }

    /// Member `i` of the neighbour family built from `indices`.
    fn neighbour(&self, i: usize, indices: Vec<usize>) -> PyResult<Self> {
        let fam = data::make_neighbour_family(&self.inner, &indices).map_err(err)?;
        let m = fam
            .member(i)
            .ok_or_else(|| SgdlabError::new_err(format!("{i} is not a family member")))?;
        Ok(Self { inner: m.clone() })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn source_id(&self) -> &str {
        self.inner.source_id()
    }

    #[getter]
    fn norm_bound(&self) -> f64 {
        self.inner.norm_bound()
    }

    #[getter]
    fn labels(&self) -> Vec<u8> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.features().rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(id={:?}, n={}, d={})",
            self.inner.source_id(),
            self.inner.n(),
            self.inner.d()
        )
    }
}

#[pyclass(name = "Model", module = "sgdlab", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelSpec,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn logreg(input_dim: usize) -> Self {
        Self {
            inner: ModelSpec::logreg(input_dim),
        }
    }

    #[staticmethod]
    fn mlp(input_dim: usize, hidden_size: usize) -> Self {
        Self {
            inner: ModelSpec::mlp(input_dim, hidden_size),
        }
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn accuracy(&self, weights: Vec<f64>, data: &PyDataset) -> PyResult<f64> {
        let w = WeightVector::from_flat(&self.inner, weights).map_err(err)?;
        train::accuracy(&self.inner, &w, &data.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Model({:?}, params={})", self.inner.kind, self.inner.param_count())
    }
}

#[pyclass(name = "Record", module = "sgdlab", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyRecord {
    inner: ExperimentRecord,
}

#[pymethods]
impl PyRecord {
    #[getter]
    fn dataset_id(&self) -> &str {
        &self.inner.key.dataset_id
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.key.seed
    }

    #[getter]
    fn init_mode(&self) -> &'static str {
        self.inner.key.init_mode.as_str()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.final_weights.values().to_vec()
    }

    #[getter]
    fn checkpoints(&self) -> BTreeMap<usize, Vec<f64>> {
        self.inner
            .checkpoints
            .iter()
            .map(|(t, w)| (*t, w.values().to_vec()))
            .collect()
    }

    #[getter]
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.metrics)
    }

    fn __repr__(&self) -> String {
        format!("Record({})", self.inner.key)
    }
}

#[pyfunction]
#[pyo3(signature = (model, data, learning_rate, batch_size, total_steps, seed = 0, init_mode = "vary", checkpoints = None))]
#[allow(clippy::too_many_arguments)]
fn train_sgd(
    py: Python<'_>,
    model: &PyModel,
    data: &PyDataset,
    learning_rate: f64,
    batch_size: usize,
    total_steps: usize,
    seed: u64,
    init_mode: &str,
    checkpoints: Option<Vec<usize>>,
) -> PyResult<PyRecord> {
    let m = mode(init_mode)?;
    let cfg =
        TrainConfig::new(learning_rate, batch_size, total_steps).with_checkpoints(checkpoints.unwrap_or_default());
    let rec = py
        .detach(|| train::run_sgd(&model.inner, &data.inner, &cfg, seed, m, None))
        .map_err(err)?;
    Ok(PyRecord { inner: rec })
}

#[pyfunction]
fn weight_distance(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(SgdlabError::new_err(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

#[pyfunction]
fn passes(steps: usize, batch_size: usize, n: usize) -> f64 {
    analysis::passes(steps, batch_size, n)
}

#[pyfunction]
fn theoretical_sensitivity(passes: f64, lipschitz: f64, learning_rate: f64, batch_size: usize) -> f64 {
    analysis::theoretical_sensitivity(passes, lipschitz, learning_rate, batch_size)
}

/// Returns `inf` when `sigma` is zero.
#[pyfunction]
#[pyo3(signature = (sensitivity, sigma, delta = None, n = None))]
fn compute_epsilon(sensitivity: f64, sigma: f64, delta: Option<f64>, n: Option<usize>) -> PyResult<f64> {
    let delta = match (delta, n) {
        (Some(d), _) => d,
        (None, Some(n)) => analysis::default_delta(n),
        (None, None) => return Err(SgdlabError::new_err("pass delta or n")),
    };
    Ok(analysis::compute_epsilon(sensitivity, sigma, delta).map_err(err)?.value)
}

#[pyfunction]
#[pyo3(signature = (epsilon, sensitivity, n, delta = None))]
fn sigma_target(epsilon: f64, sensitivity: f64, n: usize, delta: Option<f64>) -> PyResult<f64> {
    let mut p = PrivacyParams::new(epsilon, sensitivity, n);
    if let Some(d) = delta {
        p = p.with_delta(d);
    }
    privacy::sigma_target(&p).map_err(err)
}

#[pyfunction]
fn sigma_augment(sigma_target: f64, sigma_i: f64) -> f64 {
    privacy::sigma_augment(sigma_target, sigma_i).sigma_augment
}

/// Adds seeded isotropic Gaussian noise of scale `sigma`.
#[pyfunction]
#[pyo3(signature = (weights, sigma, seed = 0))]
fn privatize(weights: Vec<f64>, sigma: f64, seed: u64) -> PyResult<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(SgdlabError::new_err(format!(
            "sigma must be finite and non-negative, got {sigma}"
        )));
    }
    let z = privacy::standard_noise(weights.len(), &mut derive_stream(seed, TAG_NOISE));
    Ok(weights.iter().zip(z).map(|(w, z)| w + sigma * z).collect())
}

fn record_refs(records: &[PyRef<'_, PyRecord>]) -> Vec<ExperimentRecord> {
    records.iter().map(|r| r.inner.clone()).collect()
}

#[pyfunction]
#[pyo3(signature = (records, ids, init_mode = "vary"))]
fn empirical_sensitivity<'py>(
    py: Python<'py>,
    records: Vec<PyRef<'py, PyRecord>>,
    ids: Vec<String>,
    init_mode: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let recs = record_refs(&records);
    let report = analysis::empirical_sensitivity(&recs, &ids, mode(init_mode)?).map_err(err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (records, ids, init_mode = "vary"))]
fn variability_sigma<'py>(
    py: Python<'py>,
    records: Vec<PyRef<'py, PyRecord>>,
    ids: Vec<String>,
    init_mode: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let recs = record_refs(&records);
    let v = analysis::variability_sigma(&recs, &ids, mode(init_mode)?).map_err(err)?;
    to_py(py, &v)
}

/// `(W, p)`.
#[pyfunction]
fn shapiro_wilk(sample: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = stats::shapiro_wilk(&sample).map_err(err)?;
    Ok((r.statistic, r.p_value))
}

/// `(t, p)`, two-sided.
#[pyfunction]
fn paired_t_test(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = stats::paired_t_test(&a, &b).map_err(err)?;
    Ok((r.statistic, r.p_value))
}

#[pyfunction]
fn fixed_point_distribution(n: usize) -> PyResult<Vec<f64>> {
    theory::fixed_point_probabilities(n).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (n, trials, seed = 0))]
fn monte_carlo_fixed_points<'py>(py: Python<'py>, n: usize, trials: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let mc = py
        .detach(|| theory::monte_carlo_fixed_points(n, trials, seed))
        .map_err(err)?;
    to_py(py, &mc)
}

#[pyfunction]
fn variability_upper_bound(passes: f64, lipschitz: f64, learning_rate: f64, n: usize, batch_size: usize) -> f64 {
    theory::variability_upper_bound(&BoundInputs {
        passes,
        lipschitz,
        learning_rate,
        n,
        batch_size,
    })
}

/// Runs every (member, seed, init mode) of the grid at `config` into the
/// store at `out`. Existing records are skipped.
#[pyfunction]
#[pyo3(signature = (config, out, jobs = 0))]
fn run_grid<'py>(py: Python<'py>, config: PathBuf, out: PathBuf, jobs: usize) -> PyResult<Bound<'py, PyDict>> {
    let outcome = py
        .detach(|| -> sgdlab_core::Result<_> {
            let cfg = GridConfig::load(&config)?;
            let prepared = harness::prepare(&cfg)?;
            let mut store = ResultStore::open(&out)?;
            harness::run_grid(
                &cfg,
                &prepared,
                &mut store,
                GridOptions {
                    jobs,
                    ..GridOptions::default()
                },
            )
        })
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("new_records", outcome.new_records)?;
    d.set_item("skipped", outcome.skipped)?;
    Ok(d)
}

/// Writes every report for the stored grid under `out/reports` and returns
/// the file names.
#[pyfunction]
fn report(py: Python<'_>, config: PathBuf, out: PathBuf) -> PyResult<Vec<String>> {
    py.detach(|| -> sgdlab_core::Result<_> {
        let cfg = GridConfig::load(&config)?;
        let prepared = harness::prepare(&cfg)?;
        let store = ResultStore::open(&out)?;
        let bundle = harness::make_reports(&store.to_vec(), &cfg, &prepared);
        bundle.write_to(out.join("reports"))?;
        Ok(bundle.files.keys().cloned().collect())
    })
    .map_err(err)
}

#[pymodule]
fn sgdlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SgdlabError", m.py().get_type::<SgdlabError>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRecord>()?;
    m.add_function(wrap_pyfunction!(train_sgd, m)?)?;
    m.add_function(wrap_pyfunction!(weight_distance, m)?)?;
    m.add_function(wrap_pyfunction!(passes, m)?)?;
    m.add_function(wrap_pyfunction!(theoretical_sensitivity, m)?)?;
    m.add_function(wrap_pyfunction!(compute_epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(sigma_target, m)?)?;
    m.add_function(wrap_pyfunction!(sigma_augment, m)?)?;
    m.add_function(wrap_pyfunction!(privatize, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_sensitivity, m)?)?;
    m.add_function(wrap_pyfunction!(variability_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(shapiro_wilk, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(fixed_point_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo_fixed_points, m)?)?;
    m.add_function(wrap_pyfunction!(variability_upper_bound, m)?)?;
    m.add_function(wrap_pyfunction!(run_grid, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
