//! Python bindings: metrics, synthetic data, training, and checkpointed
//! models.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use saml_core::cli::{self, RunConfig};
use saml_core::data::{self, EncodedDataset, SyntheticSpec};
use saml_core::eval::{self, MetricsReport, MutualTrace};
use saml_core::features::ExampleRecord;
use saml_core::model::SamlModel;
use saml_core::SamlError;

fn py_err(e: SamlError) -> PyErr {
    match e {
        SamlError::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Area under the ROC curve; ties count one half.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::auc(&scores, &labels).map_err(py_err)
}

/// Relative AUC improvement over `base`, in percent.
#[pyfunction]
fn rela_impr(measured: f64, base: f64) -> PyResult<f64> {
    eval::rela_impr(measured, base).map_err(py_err)
}

/// A multi-scenario dataset with a time split.
#[pyclass(module = "saml")]
struct Dataset {
    inner: data::Dataset,
}

impl Dataset {
    fn split(&self, split: &str) -> PyResult<Vec<&ExampleRecord>> {
        match split {
            "train" => Ok(self.inner.train()),
            "test" => Ok(self.inner.test()),
            "all" => Ok(self.inner.records.iter().collect()),
            other => Err(PyValueError::new_err(format!(
                "split must be train, test or all, got `{other}`"
            ))),
        }
    }
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_dataset(path).map_err(py_err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_scenarios(&self) -> usize {
        self.inner.schema.num_scenarios
    }

    #[getter]
    fn split_ts(&self) -> i64 {
        self.inner.split_ts
    }

    fn scenario_counts(&self) -> Vec<usize> {
        self.inner.scenario_counts()
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    #[pyo3(signature = (split = "all"))]
    fn labels(&self, split: &str) -> PyResult<Vec<u8>> {
        Ok(self.split(split)?.iter().map(|r| r.label).collect())
    }

    #[pyo3(signature = (split = "all"))]
    fn scenarios(&self, split: &str) -> PyResult<Vec<usize>> {
        Ok(self.split(split)?.iter().map(|r| r.scenario).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(records={}, scenarios={}, split_ts={})",
            self.inner.len(),
            self.inner.schema.num_scenarios,
            self.inner.split_ts
        )
    }
}

/// Generates a synthetic dataset from a TOML spec (defaults when omitted).
#[pyfunction]
#[pyo3(signature = (spec = None, seed = None))]
fn synth(spec: Option<&str>, seed: Option<u64>) -> PyResult<Dataset> {
    let mut s: SyntheticSpec = match spec {
        Some(text) => saml_core::cli::parse_spec(text).map_err(py_err)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(Dataset {
        inner: data::generate_synthetic(&s).map_err(py_err)?,
    })
}

/// A trained or loaded model.
#[pyclass(module = "saml", unsendable)]
struct Model {
    inner: SamlModel,
}

impl Model {
    fn encode(&self, data: &Dataset, split: &str) -> PyResult<EncodedDataset> {
        self.inner
            .schema()
            .check_compatible(&data.inner.schema)
            .map_err(py_err)?;
        EncodedDataset::encode(self.inner.schema(), &self.inner.numeric_stats, data.split(split)?).map_err(py_err)
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SamlModel::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant().name()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Click probabilities for the records of `split`, in file order.
    #[pyo3(signature = (data, split = "test", batch_size = 1024))]
    fn predict(&self, data: &Dataset, split: &str, batch_size: usize) -> PyResult<Vec<f64>> {
        let enc = self.encode(data, split)?;
        Ok(eval::predict_all(&self.inner, &enc, batch_size).map_err(py_err)?.prob)
    }

    /// Metrics report as a dict; RelaImpr is included when a baseline
    /// report dict is given.
    #[pyo3(signature = (data, split = "test", baseline = None, batch_size = 1024))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data: &Dataset,
        split: &str,
        baseline: Option<Bound<'py, PyAny>>,
        batch_size: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let enc = self.encode(data, split)?;
        let (mut rep, _) = cli::report(&self.inner, &enc, &data.inner.content_hash(), batch_size).map_err(py_err)?;
        if let Some(b) = baseline {
            let text: String = py.import("json")?.call_method1("dumps", (b,))?.extract()?;
            let base = MetricsReport::from_json(&text).map_err(py_err)?;
            rep = rep.with_baseline(&base).map_err(py_err)?;
        }
        json_to_py(py, &rep.to_json().map_err(py_err)?)
    }

    /// Mean gates, gate histogram and mean α per scenario; `None` for
    /// variants without a mutual unit.
    #[pyo3(signature = (data, split = "test", batch_size = 1024))]
    fn mutual_trace<'py>(
        &self,
        py: Python<'py>,
        data: &Dataset,
        split: &str,
        batch_size: usize,
    ) -> PyResult<Option<Bound<'py, PyAny>>> {
        let enc = self.encode(data, split)?;
        let (_, trace) = cli::report(&self.inner, &enc, "", batch_size).map_err(py_err)?;
        trace
            .map(|t: MutualTrace| json_to_py(py, &t.to_json().map_err(py_err)?))
            .transpose()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(variant={}, scenarios={}, params={})",
            self.inner.variant().name(),
            self.inner.num_scenarios(),
            self.inner.num_params()
        )
    }
}

/// Trains a model from a TOML run configuration plus `key=value`
/// overrides. Uses `data` when given, otherwise the configured data.
/// Returns the model and the per-epoch log as a list of dicts.
#[pyfunction]
#[pyo3(signature = (config = None, overrides = Vec::new(), data = None))]
fn train<'py>(
    py: Python<'py>,
    config: Option<&str>,
    overrides: Vec<String>,
    data: Option<&Dataset>,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let base = match config {
        Some(text) => RunConfig::from_toml(text).map_err(py_err)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&overrides).map_err(py_err)?;
    let loaded;
    let dataset = match data {
        Some(d) => &d.inner,
        None => {
            loaded = cli::load_data(&cfg).map_err(py_err)?;
            &loaded
        }
    };
    let out = cli::train(&cfg, dataset).map_err(py_err)?;
    let log = serde_json::to_string(&out.log).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((Model { inner: out.model }, json_to_py(py, &log)?))
}

#[pymodule]
pub fn saml(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(rela_impr, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    Ok(())
}
