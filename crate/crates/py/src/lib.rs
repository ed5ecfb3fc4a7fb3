//! Python bindings. Arrays cross the boundary as flat lists: cubes are
//! pixel-interleaved (`(row * width + col) * bands + band`), maps and masks
//! row-major.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use superad::metrics::{evaluate as evaluate_map, map_auc};
use superad::modelfile::{load_model as load_model_file, save_model};
use superad::superpixel::{slic_segment, DEFAULT_COMPACTNESS, DEFAULT_MAX_ITERS};
use superad::train::{detect as detect_map, train as train_model};
use superad::{
    io, rxd as rx, synth, AdaConvConfig, AnomalyMap, Error, GroundTruth, HsiCube, LossKind,
    ObpmConfig, Perturbation, SceneSpec, TrainConfig, TrainedModel,
};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A hyperspectral cube of shape `height x width x bands`.
#[pyclass(name = "Cube", module = "superad_py")]
struct Cube {
    inner: HsiCube,
}

#[pymethods]
impl Cube {
    #[new]
    fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: HsiCube::new(height, width, bands, data).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: io::load_cube(path).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::save_cube(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn bands(&self) -> usize {
        self.inner.bands()
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    /// Per-band min-max scaling to `[0, 1]`.
    fn normalize(&self) -> Self {
        Self { inner: self.inner.normalize_bands() }
    }

    fn __repr__(&self) -> String {
        format!("Cube({}x{}x{})", self.inner.height(), self.inner.width(), self.inner.bands())
    }
}

/// Trained SuperAD parameters plus the guidance they were last run with.
#[pyclass(name = "Model", module = "superad_py")]
struct Model {
    inner: TrainedModel,
}

#[pymethods]
impl Model {
    /// Anomaly scores for `cube`, which must match the training dimensions.
    fn detect(&self, py: Python<'_>, cube: &Cube) -> PyResult<Vec<f64>> {
        let map = py.detach(|| detect_map(&cube.inner, &self.inner)).map_err(to_py)?;
        Ok(map.scores().to_vec())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.params.parameter_count()
    }

    /// Training configuration as JSON.
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pyfunction]
fn load_model(path: &str) -> PyResult<Model> {
    Ok(Model { inner: load_model_file(path).map_err(to_py)? })
}

/// Returns `(cube, mask)`.
#[pyfunction]
#[pyo3(signature = (height=64, width=64, bands=32, rate=0.005, seed=1, contrast=0.25, smoothness=12, endmembers=4))]
#[allow(clippy::too_many_arguments)]
fn synth_scene(
    height: usize,
    width: usize,
    bands: usize,
    rate: f64,
    seed: u64,
    contrast: f64,
    smoothness: usize,
    endmembers: usize,
) -> PyResult<(Cube, Vec<bool>)> {
    let spec = SceneSpec {
        height,
        width,
        bands,
        endmember_count: endmembers,
        anomaly_rate: rate,
        anomaly_contrast: contrast,
        smoothness,
        seed,
    };
    let (cube, gt) = synth::synth_scene(&spec).map_err(to_py)?;
    Ok((Cube { inner: cube }, gt.mask().to_vec()))
}

/// SLIC labels of the band-normalised cube.
#[pyfunction]
#[pyo3(signature = (cube, segments=100, compactness=DEFAULT_COMPACTNESS, iters=DEFAULT_MAX_ITERS))]
fn slic(py: Python<'_>, cube: &Cube, segments: usize, compactness: f64, iters: usize) -> PyResult<Vec<usize>> {
    let x = cube.inner.normalize_bands();
    let labels = py.detach(|| slic_segment(&x, segments, compactness, iters)).map_err(to_py)?;
    Ok(labels.labels().to_vec())
}

#[pyfunction]
fn rxd(py: Python<'_>, cube: &Cube) -> PyResult<Vec<f64>> {
    let map = py.detach(|| rx::rxd(&cube.inner)).map_err(to_py)?;
    Ok(map.scores().to_vec())
}

fn parse_loss(s: &str) -> PyResult<LossKind> {
    match s {
        "obpm" => Ok(LossKind::Obpm),
        "l1" => Ok(LossKind::L1),
        "l2" => Ok(LossKind::L2),
        _ => Err(PyValueError::new_err(format!("unknown loss {s:?}"))),
    }
}

fn parse_perturbation(s: &str) -> PyResult<Perturbation> {
    match s {
        "spp" => Ok(Perturbation::Spp),
        "none" => Ok(Perturbation::None),
        _ => Err(PyValueError::new_err(format!("unknown perturbation {s:?}"))),
    }
}

/// Trains SuperAD and returns `(scores, model, epoch_log)`; `epoch_log` rows
/// are `(epoch, loss, retained_fraction, auc or None)`.
#[pyfunction]
#[pyo3(signature = (cube, epochs=500, lr=1e-3, segments=100, window=9, kernel=3, alpha=1.0, beta=1.0, seed=0, loss="obpm", perturbation="spp", mask=None))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn train(
    py: Python<'_>,
    cube: &Cube,
    epochs: usize,
    lr: f64,
    segments: usize,
    window: usize,
    kernel: usize,
    alpha: f64,
    beta: f64,
    seed: u64,
    loss: &str,
    perturbation: &str,
    mask: Option<Vec<bool>>,
) -> PyResult<(Vec<f64>, Model, Vec<(usize, f64, f64, Option<f64>)>)> {
    let config = TrainConfig {
        epochs,
        learning_rate: lr,
        segments,
        adaconv: AdaConvConfig { window, kernel },
        obpm: ObpmConfig { alpha, beta },
        seed,
        loss_kind: parse_loss(loss)?,
        perturbation: parse_perturbation(perturbation)?,
        ..TrainConfig::default()
    };
    let gt = mask
        .map(|m| GroundTruth::new(cube.inner.height(), cube.inner.width(), m))
        .transpose()
        .map_err(to_py)?;
    let out = py.detach(|| train_model(&cube.inner, &config, gt.as_ref())).map_err(to_py)?;
    let logs = out
        .logs
        .iter()
        .map(|l| (l.epoch, l.loss, l.retained_fraction, l.auc))
        .collect();
    Ok((out.map.scores().to_vec(), Model { inner: out.model }, logs))
}

fn pair(height: usize, width: usize, scores: Vec<f64>, mask: Vec<bool>) -> PyResult<(AnomalyMap, GroundTruth)> {
    Ok((
        AnomalyMap::new(height, width, scores).map_err(to_py)?,
        GroundTruth::new(height, width, mask).map_err(to_py)?,
    ))
}

#[pyfunction]
fn auc(height: usize, width: usize, scores: Vec<f64>, mask: Vec<bool>) -> PyResult<f64> {
    let (map, gt) = pair(height, width, scores, mask)?;
    map_auc(&map, &gt).map_err(to_py)
}

/// AUC, threshold areas and SNPR (dB) as a dict.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    height: usize,
    width: usize,
    scores: Vec<f64>,
    mask: Vec<bool>,
) -> PyResult<Bound<'py, PyDict>> {
    let (map, gt) = pair(height, width, scores, mask)?;
    let (report, _) = evaluate_map(&map, &gt).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("auc", report.auc)?;
    d.set_item("a_pd_tau", report.a_pd_tau)?;
    d.set_item("a_pf_tau", report.a_pf_tau)?;
    d.set_item("snpr_db", report.snpr_db)?;
    Ok(d)
}

#[pymodule]
fn superad_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Cube>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(slic, m)?)?;
    m.add_function(wrap_pyfunction!(rxd, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(load_model, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
