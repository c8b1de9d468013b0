//! Python bindings for the tabular perceiver: encoding and metric
//! primitives, the synthetic generator, and train/evaluate/predict on the
//! experiment harness.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tabperceiver::data::{load_csv, SyntheticConfig};
use tabperceiver::encoding::BinSpec;
use tabperceiver::harness::{cmd_eval, cmd_generate, cmd_train, ExperimentConfig, Variant};
use tabperceiver::model::TabPerceiver as CoreModel;
use tabperceiver::{encoding, metrics};

fn err(e: tabperceiver::Error) -> PyErr {
    match e {
        tabperceiver::Error::Usage(_) | tabperceiver::Error::Config(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Quantile-bin boundaries for piecewise-linear encoding.
#[pyfunction]
fn fit_bins(values: Vec<f64>, requested: usize) -> PyResult<Vec<f64>> {
    Ok(encoding::fit_bins(&values, requested).map_err(err)?.boundaries)
}

/// Piecewise-linear encoding of `x` against the given boundaries.
#[pyfunction]
fn ple_encode(x: f64, boundaries: Vec<f64>) -> PyResult<Vec<f64>> {
    encoding::ple_encode(x, &BinSpec { boundaries }).map_err(err)
}

/// Exact tie-aware ROC AUC.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &labels).map_err(err)
}

/// Stratified percentile bootstrap CI for the AUC.
#[pyfunction]
fn auc_bootstrap_ci(
    scores: Vec<f64>,
    labels: Vec<bool>,
    resamples: usize,
    level: f64,
    seed: u64,
) -> PyResult<(f64, f64)> {
    metrics::auc_bootstrap_ci(&scores, &labels, resamples, level, seed).map_err(err)
}

/// Multiclass Brier score of probability rows against integer labels.
#[pyfunction]
fn brier(probs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    Ok(metrics::brier(&probs, &labels))
}

/// Paired t-test: (statistic, p_value, dof).
#[pyfunction]
fn paired_t_test(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let r = metrics::paired_t_test(&a, &b).map_err(err)?;
    Ok((r.statistic, r.p_value, r.dof.unwrap_or(f64::NAN)))
}

/// Write a synthetic cohort (cohort.csv, ground_truth.json, schema.toml).
#[pyfunction]
#[pyo3(signature = (out_dir, rows=1000, rho=0.8, risk_label_noise=0.0, downstream_label_noise=0.0, missing_rate=0.0, seed=0))]
fn generate(
    out_dir: PathBuf,
    rows: usize,
    rho: f64,
    risk_label_noise: f64,
    downstream_label_noise: f64,
    missing_rate: f64,
    seed: u64,
) -> PyResult<()> {
    let config = SyntheticConfig {
        rows,
        rho,
        risk_label_noise,
        downstream_label_noise,
        missing_rate,
        ..SyntheticConfig::default()
    };
    cmd_generate(&config, seed, &out_dir).map_err(err)
}

fn experiment(config_path: Option<&Path>, variant: Option<&str>) -> PyResult<ExperimentConfig> {
    let mut config = match config_path {
        Some(p) => ExperimentConfig::load(p).map_err(err)?,
        None => ExperimentConfig::default(),
    };
    if let Some(name) = variant {
        config.variant = Variant::parse(name).map_err(err)?;
        config.validate().map_err(err)?;
    }
    Ok(config)
}

/// Train per the experiment config; returns the report as a JSON string.
/// `data` of None synthesizes a cohort from the config.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None, data=None, variant=None, seed=0))]
fn train(
    out_dir: PathBuf,
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    variant: Option<String>,
    seed: u64,
) -> PyResult<String> {
    let config = experiment(config.as_deref(), variant.as_deref())?;
    let outcome = cmd_train(&config, data.as_deref(), seed, &out_dir).map_err(err)?;
    serde_json::to_string_pretty(&outcome.report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Score a checkpoint on a dataset; returns the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, out_dir, seed=0))]
fn evaluate(checkpoint: PathBuf, data: PathBuf, out_dir: PathBuf, seed: u64) -> PyResult<String> {
    let report = cmd_eval(&checkpoint, &data, seed, &out_dir).map_err(err)?;
    serde_json::to_string_pretty(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// A trained model loaded from a checkpoint.
#[pyclass]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: CoreModel::load(&path).map_err(err)?,
        })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn tasks(&self) -> Vec<(String, usize)> {
        self.inner
            .config
            .tasks
            .iter()
            .map(|t| (t.name.clone(), t.classes))
            .collect()
    }

    /// Per-task class probabilities for every row of a cohort CSV:
    /// {task: [[p_class0, ...], ...]}.
    fn predict_proba(
        &self,
        data: PathBuf,
    ) -> PyResult<std::collections::BTreeMap<String, Vec<Vec<f64>>>> {
        let table = load_csv(&data, &self.inner.schema).map_err(err)?;
        let probs = self.inner.predict_proba(&table).map_err(err)?;
        Ok(self
            .inner
            .config
            .tasks
            .iter()
            .zip(probs)
            .map(|(t, p)| (t.name.clone(), p))
            .collect())
    }
}

#[pymodule]
fn tabperceiver_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(fit_bins, m)?)?;
    m.add_function(wrap_pyfunction!(ple_encode, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(auc_bootstrap_ci, m)?)?;
    m.add_function(wrap_pyfunction!(brier, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
