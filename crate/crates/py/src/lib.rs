//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists (through JSON), feature matrices as lists of rows.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::de::DeserializeOwned;
use serde::Serialize;

use rh_core::ablation::{run_ablation, AblationAxes};
use rh_core::eval;
use rh_core::model::HighlightModel;
use rh_core::pipeline::{round_scores, run_in_memory, run_pipeline, PipelineSettings, RunConfig, StageError};
use rh_core::store::{self, validate_dataset};
use rh_core::synth::{generate, SynthConfig};
use rh_core::{Dataset as CoreDataset, FeatureMatrix, Split};

create_exception!(rh, RhError, PyException, "Raised when a pipeline operation fails.");

fn err(e: rh_core::Error) -> PyErr {
    RhError::new_err(e.to_string())
}

fn stage_err(e: StageError) -> PyErr {
    RhError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// `json.dumps` with `str` as the fallback encoder, so `pathlib` paths pass.
fn dumps(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<String> {
    let kwargs = pyo3::types::PyDict::new(py);
    kwargs.set_item("default", py.get_type::<pyo3::types::PyString>())?;
    py.import("json")?.call_method("dumps", (value,), Some(&kwargs))?.extract()
}

fn from_py<T: DeserializeOwned + Default>(py: Python<'_>, value: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(value) = value else { return Ok(T::default()) };
    if value.is_none() {
        return Ok(T::default());
    }
    let text = dumps(py, value)?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(m: &FeatureMatrix) -> Vec<Vec<f32>> {
    m.iter_rows().map(<[f32]>::to_vec).collect()
}

fn parse_split(split: Option<&str>) -> PyResult<Option<Split>> {
    split
        .map(|s| s.parse::<Split>().map_err(|e| PyValueError::new_err(e.to_string())))
        .transpose()
}

/// A loaded feature dataset.
#[pyclass(name = "Dataset", module = "rh")]
struct PyDataset {
    inner: CoreDataset,
}

#[pymethods]
impl PyDataset {
    /// Reads and validates a dataset root.
    #[staticmethod]
    fn load(root: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: store::read_dataset(&root).map_err(err)?,
        })
    }

    /// Writes the dataset under `root`; returns the written paths.
    fn write(&self, root: PathBuf) -> PyResult<Vec<PathBuf>> {
        store::write_dataset(&self.inner, &root).map_err(err)
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn d_v(&self) -> usize {
        self.inner.d_v
    }

    #[getter]
    fn d_a(&self) -> usize {
        self.inner.d_a
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    #[pyo3(signature = (split=None))]
    fn video_ids(&self, split: Option<&str>) -> PyResult<Vec<String>> {
        let split = parse_split(split)?;
        Ok(self
            .inner
            .records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|r| r.video_id.clone())
            .collect())
    }

    /// `(visual_rows, audio_rows, gt_scores or None)` of one video.
    #[allow(clippy::type_complexity)]
    fn features(&self, video_id: &str) -> PyResult<(Vec<Vec<f32>>, Vec<Vec<f32>>, Option<Vec<f32>>)> {
        let r = self
            .inner
            .get(video_id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown video {video_id:?}")))?;
        Ok((rows(&r.visual), rows(&r.audio), r.gt_scores.clone()))
    }

    fn category(&self, video_id: &str) -> Option<String> {
        self.inner.category_labels.get(video_id).cloned()
    }

    /// Human-readable violations; empty when the dataset is valid.
    fn validate(&self) -> Vec<String> {
        validate_dataset(&self.inner).iter().map(ToString::to_string).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name={:?}, videos={}, d_v={}, d_a={})",
            self.inner.name,
            self.inner.records.len(),
            self.inner.d_v,
            self.inner.d_a
        )
    }
}

/// A trained highlight network checkpoint.
#[pyclass(name = "Model", module = "rh")]
struct PyModel {
    inner: HighlightModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: HighlightModel::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.config.variant.to_string()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.names().map(str::to_owned).collect()
    }

    /// Softmax weights of the four fused streams, or None for single-stream variants.
    fn gate_weights(&self) -> Option<Vec<f64>> {
        self.inner.gate_weights()
    }

    /// Per-clip scores of every video in `split` (all videos when None).
    #[pyo3(signature = (dataset, split=Some("test")))]
    fn predict(&self, py: Python<'_>, dataset: &PyDataset, split: Option<&str>) -> PyResult<BTreeMap<String, Vec<f32>>> {
        let split = parse_split(split)?;
        let records: Vec<_> = dataset
            .inner
            .records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .collect();
        let scores = py.detach(|| rh_core::model::predict(&self.inner, &records)).map_err(err)?;
        Ok(round_scores(scores))
    }
}

/// Generates a synthetic dataset; `config` takes synthetic config fields.
#[pyfunction]
#[pyo3(signature = (config=None, seed=None))]
fn synth(py: Python<'_>, config: Option<&Bound<'_, PyAny>>, seed: Option<u64>) -> PyResult<PyDataset> {
    let mut cfg: SynthConfig = from_py(py, config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(PyDataset {
        inner: generate(&cfg).map_err(err)?,
    })
}

/// Runs the whole chain in memory and returns the evaluation report plus the chosen K.
#[pyfunction]
#[pyo3(signature = (dataset, settings=None))]
fn run<'py>(py: Python<'py>, dataset: &PyDataset, settings: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let settings: PipelineSettings = from_py(py, settings)?;
    let outcome = py.detach(|| run_in_memory(&dataset.inner, &settings)).map_err(stage_err)?;
    let summary = serde_json::json!({
        "K": outcome.categories.k,
        "report": outcome.report,
        "epoch_losses": outcome.train_report.map(|r| r.epoch_losses),
    });
    to_py(py, &summary)
}

/// On-disk pipeline. `config` holds `dataset`, `out` and any settings.
#[pyfunction]
fn pipeline<'py>(py: Python<'py>, config: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let text = dumps(py, config)?;
    let config: RunConfig = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let (outcome, artifacts) = py.detach(|| run_pipeline(&config)).map_err(stage_err)?;
    to_py(py, &serde_json::json!({ "report": outcome.report, "artifacts": artifacts.files }))
}

#[pyfunction]
#[pyo3(signature = (dataset, axes=None, seeds=vec![0], settings=None))]
fn ablate<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    axes: Option<&Bound<'py, PyAny>>,
    seeds: Vec<u64>,
    settings: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let axes: AblationAxes = from_py(py, axes)?;
    let settings: PipelineSettings = from_py(py, settings)?;
    let table = py
        .detach(|| run_ablation(&dataset.inner, &settings, &axes, &seeds))
        .map_err(stage_err)?;
    to_py(py, &table)
}

#[pyfunction]
fn read_avhf(path: PathBuf) -> PyResult<Vec<Vec<f32>>> {
    Ok(rows(&store::read_avhf(&path).map_err(err)?))
}

#[pyfunction]
fn write_avhf(path: PathBuf, rows: Vec<Vec<f32>>) -> PyResult<()> {
    let m = FeatureMatrix::from_rows(&rows).map_err(err)?;
    store::write_avhf(&path, &m).map_err(err)
}

/// None when `gt` has no positive clip.
#[pyfunction]
fn average_precision(scores: Vec<f64>, gt: Vec<bool>) -> PyResult<Option<f64>> {
    eval::average_precision(&scores, &gt).map_err(err)
}

#[pyfunction]
fn top5_average_precision(scores: Vec<f64>, gt: Vec<bool>) -> PyResult<Option<f64>> {
    eval::top5_average_precision(&scores, &gt).map_err(err)
}

#[pyfunction]
fn hit_at_1(scores: Vec<f64>, gt: Vec<bool>) -> PyResult<f64> {
    eval::hit_at_1(&scores, &gt).map_err(err)
}

#[pymodule]
#[pyo3(name = "rh")]
pub fn rh_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RhError", m.py().get_type::<RhError>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(read_avhf, m)?)?;
    m.add_function(wrap_pyfunction!(write_avhf, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(top5_average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(hit_at_1, m)?)?;
    Ok(())
}
