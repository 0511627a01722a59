//! Python bindings for protoverify.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use protoverify::evalmetrics::{self, ScoreName};
use protoverify::protobank::{build_from_dataset, finetune_from_dataset};
use protoverify::scorers::{score_batch, write_predictions, ScoredPrediction};
use protoverify::{embedstore, Error, FinetuneConfig, NormState, ScoringConfig, SynthConfig};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// `(class, requested, available)`
type Shortfall = (usize, usize, usize);

/// Row-major f32 matrix, optionally tagged unit-norm.
#[pyclass(name = "EmbeddingMatrix", module = "protoverify", frozen)]
struct PyEmbeddingMatrix {
    inner: protoverify::EmbeddingMatrix,
}

#[pymethods]
impl PyEmbeddingMatrix {
    #[new]
    #[pyo3(signature = (rows, unit = false))]
    fn new(rows: Vec<Vec<f32>>, unit: bool) -> PyResult<Self> {
        let state = if unit { NormState::Unit } else { NormState::Raw };
        let inner = protoverify::EmbeddingMatrix::from_rows(&rows, state).map_err(to_py)?;
        Ok(PyEmbeddingMatrix { inner })
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn dims(&self) -> usize {
        self.inner.dims()
    }

    #[getter]
    fn is_unit(&self) -> bool {
        self.inner.norm_state() == NormState::Unit
    }

    fn normalized(&self) -> PyResult<Self> {
        let inner = protoverify::l2_normalize(&self.inner).map_err(to_py)?;
        Ok(PyEmbeddingMatrix { inner })
    }

    fn to_list(&self) -> Vec<Vec<f32>> {
        self.inner.iter_rows().map(<[f32]>::to_vec).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.rows()
    }

    fn __repr__(&self) -> String {
        format!(
            "EmbeddingMatrix(rows={}, dims={}, unit={})",
            self.inner.rows(),
            self.inner.dims(),
            self.is_unit()
        )
    }
}

#[pyfunction]
fn read_embeddings(path: std::path::PathBuf) -> PyResult<PyEmbeddingMatrix> {
    let inner = protoverify::read_embeddings(path).map_err(to_py)?;
    Ok(PyEmbeddingMatrix { inner })
}

#[pyfunction]
fn write_embeddings(matrix: &PyEmbeddingMatrix, path: std::path::PathBuf) -> PyResult<()> {
    protoverify::write_embeddings(&matrix.inner, path).map_err(to_py)
}

/// Manifest plus the loaded embedding spaces.
#[pyclass(name = "Dataset", module = "protoverify", frozen)]
struct PyDataset {
    inner: embedstore::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(manifest: std::path::PathBuf) -> PyResult<Self> {
        let inner = embedstore::Dataset::load(manifest).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    /// Writes `<space>.tvem` files and `manifest.json` into `dir`; returns the manifest path.
    fn save(&self, dir: std::path::PathBuf) -> PyResult<std::path::PathBuf> {
        self.inner.clone().save(dir).map_err(to_py)
    }

    #[getter]
    fn dataset_id(&self) -> &str {
        &self.inner.manifest.dataset_id
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.manifest.class_names.clone()
    }

    #[getter]
    fn sample_ids(&self) -> Vec<String> {
        self.inner.manifest.samples.iter().map(|s| s.id.clone()).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.manifest.labels()
    }

    fn space(&self, name: &str) -> PyResult<PyEmbeddingMatrix> {
        let inner = match name {
            "vlm_image" => self.inner.vlm_image().map_err(to_py)?.clone(),
            "vlm_text" => self.inner.vlm_text().map_err(to_py)?.matrix().clone(),
            "aux_image" => self.inner.aux_image().map_err(to_py)?.clone(),
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown space {other:?}; expected vlm_image, vlm_text or aux_image"
                )))
            }
        };
        Ok(PyEmbeddingMatrix { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.manifest.samples.len()
    }
}

#[pyfunction]
#[pyo3(signature = (
    classes = 10, dims = 64, samples_per_class = 40, vlm_image_spread = 0.9,
    aux_image_spread = 0.45, text_noise = 0.35, gap_magnitude = 2.0, seed = 7
))]
#[allow(clippy::too_many_arguments)]
fn generate_synthetic(
    classes: usize,
    dims: usize,
    samples_per_class: usize,
    vlm_image_spread: f64,
    aux_image_spread: f64,
    text_noise: f64,
    gap_magnitude: f64,
    seed: u64,
) -> PyResult<PyDataset> {
    let config = SynthConfig {
        classes,
        dims,
        samples_per_class,
        vlm_image_spread,
        aux_image_spread,
        text_noise,
        gap_magnitude,
        seed,
    };
    let inner = protoverify::generate_synthetic(&config).map_err(to_py)?;
    Ok(PyDataset { inner })
}

#[pyclass(name = "PrototypeBank", module = "protoverify", frozen)]
struct PyPrototypeBank {
    inner: protoverify::PrototypeBank,
}

#[pymethods]
impl PyPrototypeBank {
    /// Builds prototypes from the training split. Returns the bank and a list
    /// of `(class, requested, available)` for classes short of shots.
    #[staticmethod]
    #[pyo3(signature = (dataset, shots = 16, seed = 0))]
    fn build(
        dataset: &PyDataset,
        shots: usize,
        seed: u64,
    ) -> PyResult<(Self, Vec<Shortfall>)> {
        let (inner, shortfalls) = build_from_dataset(&dataset.inner, shots, seed).map_err(to_py)?;
        let shortfalls = shortfalls
            .into_iter()
            .map(|s| (s.class, s.requested, s.available))
            .collect();
        Ok((PyPrototypeBank { inner }, shortfalls))
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let inner = protoverify::PrototypeBank::load(path).map_err(to_py)?;
        Ok(PyPrototypeBank { inner })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    /// Fine-tunes on the bank's own shot samples. Returns the new bank and a
    /// trace dict with per-epoch `loss` and `accuracy`.
    #[pyo3(signature = (dataset, epochs = 10, learning_rate = 0.001, temperature = 0.01))]
    fn finetune<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        epochs: usize,
        learning_rate: f64,
        temperature: f64,
    ) -> PyResult<(Self, Bound<'py, PyDict>)> {
        let config = FinetuneConfig {
            epochs,
            learning_rate,
            temperature,
        };
        let (inner, trace) = finetune_from_dataset(&self.inner, &dataset.inner, &config).map_err(to_py)?;
        let out = PyDict::new(py);
        out.set_item("loss", trace.loss)?;
        out.set_item("accuracy", trace.accuracy)?;
        Ok((PyPrototypeBank { inner }, out))
    }

    #[getter]
    fn prototypes(&self) -> PyEmbeddingMatrix {
        PyEmbeddingMatrix {
            inner: self.inner.prototypes().clone(),
        }
    }

    #[getter]
    fn provenance(&self) -> Vec<Vec<String>> {
        self.inner.provenance().to_vec()
    }

    #[getter]
    fn shots(&self) -> usize {
        self.inner.shots()
    }

    #[getter]
    fn finetuned(&self) -> bool {
        self.inner.finetuned()
    }

    #[getter]
    fn dataset_id(&self) -> Option<&str> {
        self.inner.dataset_id()
    }
}

/// Scored test-split predictions.
#[pyclass(name = "Predictions", module = "protoverify", frozen)]
struct PyPredictions {
    inner: Vec<ScoredPrediction>,
}

#[pymethods]
impl PyPredictions {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// One dict per sample.
    fn to_list<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let text = serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))?;
        json_to_py(py, &text)
    }

    /// Values of one score column (e.g. `"msp"`, `"kappa"`) and the matching
    /// correctness flags; `kappa_star` pairs with ensemble correctness.
    fn scores(&self, name: &str) -> PyResult<(Vec<f64>, Vec<bool>)> {
        let name: ScoreName = name.parse().map_err(to_py)?;
        self.inner
            .iter()
            .map(|p| {
                name.extract(p).ok_or_else(|| {
                    PyValueError::new_err(format!("{name} was not computed for {}", p.sample_id))
                })
            })
            .collect::<PyResult<Vec<_>>>()
            .map(|pairs| pairs.into_iter().unzip())
    }

    fn correct(&self) -> Vec<Option<bool>> {
        self.inner.iter().map(|p| p.correct).collect()
    }

    fn write(&self, path: std::path::PathBuf) -> PyResult<()> {
        write_predictions(path, &self.inner, &[]).map_err(to_py)
    }

    /// Evaluation report as a dict.
    fn evaluate<'py>(&self, py: Python<'py>, scores: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
        let names = scores
            .iter()
            .map(|s| s.parse::<ScoreName>())
            .collect::<protoverify::Result<Vec<_>>>()
            .map_err(to_py)?;
        let report = evalmetrics::evaluate(&self.inner, &names, Default::default()).map_err(to_py)?;
        json_to_py(py, &report.to_json())
    }
}

#[pyfunction]
#[pyo3(signature = (
    dataset, bank = None, tau = 0.01, weight = 1.0, energy_temperature = 1.0, mcm_temperature = 1.0
))]
fn score(
    dataset: &PyDataset,
    bank: Option<&PyPrototypeBank>,
    tau: f64,
    weight: f64,
    energy_temperature: f64,
    mcm_temperature: f64,
) -> PyResult<PyPredictions> {
    let config = ScoringConfig {
        tau,
        i2i_weight: weight,
        energy_temperature,
        mcm_temperature,
    };
    config.validate().map_err(to_py)?;
    let inner = score_batch(&dataset.inner, bank.map(|b| &b.inner), &config).map_err(to_py)?;
    Ok(PyPredictions { inner })
}

#[pyfunction]
fn auroc(scores: Vec<f64>, correct: Vec<bool>) -> PyResult<f64> {
    evalmetrics::auroc(&scores, &correct).map_err(to_py)
}

/// Area under the risk-coverage curve (raw scale, not x1000).
#[pyfunction]
fn aurc(scores: Vec<f64>, correct: Vec<bool>) -> PyResult<f64> {
    let curve = evalmetrics::risk_coverage_curve(&scores, &correct).map_err(to_py)?;
    evalmetrics::aurc(&curve).map_err(to_py)
}

/// Returns `(fpr, tpr, threshold)`.
#[pyfunction]
#[pyo3(signature = (scores, correct, target_tpr = 0.95))]
fn fpr_at_tpr(scores: Vec<f64>, correct: Vec<bool>, target_tpr: f64) -> PyResult<(f64, f64, f64)> {
    let r = evalmetrics::fpr_at_tpr(&scores, &correct, target_tpr).map_err(to_py)?;
    Ok((r.fpr, r.tpr, r.threshold))
}

#[pymodule]
#[pyo3(name = "protoverify")]
pub fn protoverify_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEmbeddingMatrix>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPrototypeBank>()?;
    m.add_class::<PyPredictions>()?;
    m.add_function(wrap_pyfunction!(read_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(write_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(aurc, m)?)?;
    m.add_function(wrap_pyfunction!(fpr_at_tpr, m)?)?;
    Ok(())
}
