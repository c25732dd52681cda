//! Python bindings for the voxloc core.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use voxloc::experiment::{cmd_analyze, cmd_generate, cmd_run, ExperimentConfig};
use voxloc::heatmap::{self, HeatmapSpec, Side};
use voxloc::phantom::{self as ph, PhantomSpec};
use voxloc::pipeline::{Pipeline, PipelineConfig, SideTargets};
use voxloc::predictors::{OracleLocalizer as CoreOracle, OracleLocalizerConfig, TruthSegmenter};
use voxloc::transforms::{self as tf, TransformPriors};
use voxloc::uncertainty::{self as unc, McConfig, McMode};
use voxloc::volume_io;
use voxloc::{Error, Interpolation, Volume3};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for Result<T, Error> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn interp(name: &str) -> PyResult<Interpolation> {
    match name {
        "trilinear" => Ok(Interpolation::Trilinear),
        "nearest" => Ok(Interpolation::Nearest),
        _ => Err(PyValueError::new_err(format!("unknown interpolation {name:?}"))),
    }
}

/// Dense 3D volume, x-fastest, in physical units given by `spacing`.
#[pyclass(name = "Volume", module = "voxloc_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyVolume {
    inner: Volume3,
}

impl From<Volume3> for PyVolume {
    fn from(inner: Volume3) -> Self {
        Self { inner }
    }
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (dims, data, spacing = [1.0, 1.0, 1.0]))]
    fn new(dims: [usize; 3], data: Vec<f64>, spacing: [f64; 3]) -> PyResult<Self> {
        Ok(Volume3::new(dims, spacing, data).py()?.into())
    }

    #[staticmethod]
    #[pyo3(signature = (dims, spacing = [1.0, 1.0, 1.0]))]
    fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> PyResult<Self> {
        Ok(Volume3::zeros(dims, spacing).py()?.into())
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(volume_io::read_volume(&path).py()?.into())
    }

    /// Writes `<stem>.json` and `<stem>.raw`.
    fn write(&self, stem: PathBuf) -> PyResult<()> {
        volume_io::write_volume(&self.inner, &stem).py().map(|_| ())
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.inner.spacing()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?}, spacing={:?})", self.inner.dims(), self.inner.spacing())
    }

    fn get(&self, i: usize, j: usize, k: usize) -> PyResult<f64> {
        self.inner
            .get_checked([i as i64, j as i64, k as i64])
            .ok_or_else(|| PyValueError::new_err("index out of bounds"))
    }

    fn min_max(&self) -> (f64, f64) {
        self.inner.min_max()
    }

    fn max_abs_diff(&self, other: &PyVolume) -> PyResult<f64> {
        self.inner.max_abs_diff(&other.inner).py()
    }

    #[pyo3(signature = (dims, interpolation = "trilinear"))]
    fn resample_to(&self, dims: [usize; 3], interpolation: &str) -> PyResult<Self> {
        Ok(self.inner.resample_to(dims, interp(interpolation)?).py()?.into())
    }

    fn resample_isotropic(&self, spacing: f64) -> PyResult<Self> {
        Ok(self.inner.resample_isotropic(spacing).py()?.into())
    }

    fn downsample_to(&self, dims: [usize; 3]) -> PyResult<Self> {
        Ok(self.inner.downsample_to(dims).py()?.into())
    }

    fn rescale_intensity(&self) -> Self {
        self.inner.rescale_intensity().into()
    }

    fn flip_lr(&self) -> Self {
        self.inner.flip_lr().into()
    }

    fn argmax(&self) -> PyResult<[usize; 3]> {
        heatmap::argmax_position(&self.inner).py()
    }
}

#[pyclass(name = "RigidTransform", module = "voxloc_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyRigid {
    inner: tf::RigidTransform,
}

#[pymethods]
impl PyRigid {
    #[new]
    #[pyo3(signature = (axis, angle_deg, translation, pivot = [0.0, 0.0, 0.0]))]
    fn new(axis: [f64; 3], angle_deg: f64, translation: [f64; 3], pivot: [f64; 3]) -> PyResult<Self> {
        Ok(Self {
            inner: tf::RigidTransform::new(axis, angle_deg, translation, pivot).py()?,
        })
    }

    fn map_point(&self, p: [f64; 3]) -> [f64; 3] {
        self.inner.map_point(p)
    }

    fn unmap_point(&self, p: [f64; 3]) -> [f64; 3] {
        self.inner.unmap_point(p)
    }

    fn invert(&self) -> Self {
        Self {
            inner: self.inner.invert(),
        }
    }

    #[pyo3(signature = (volume, interpolation = "trilinear"))]
    fn apply(&self, volume: &PyVolume, interpolation: &str) -> PyResult<PyVolume> {
        Ok(self.inner.apply(&volume.inner, interp(interpolation)?).into())
    }

    /// `(axis, angle_deg, translation)`.
    fn params(&self) -> ([f64; 3], f64, [f64; 3]) {
        let p = self.inner.params();
        (p.axis, p.angle_deg, p.translation)
    }
}

#[pyclass(name = "IntensityCurve", module = "voxloc_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyCurve {
    inner: tf::IntensityCurve,
}

#[pymethods]
impl PyCurve {
    #[new]
    fn new(p1: [f64; 2], p2: [f64; 2]) -> PyResult<Self> {
        Ok(Self {
            inner: tf::IntensityCurve::new(p1, p2).py()?,
        })
    }

    #[staticmethod]
    fn identity() -> Self {
        Self {
            inner: tf::IntensityCurve::identity(),
        }
    }

    /// Point on the Bézier curve at parameter `t`.
    fn eval(&self, t: f64) -> PyResult<[f64; 2]> {
        self.inner.eval(t).py()
    }

    fn apply(&self, x: f64) -> f64 {
        self.inner.apply(x)
    }

    fn apply_inverse(&self, y: f64) -> f64 {
        self.inner.apply_inverse(y)
    }

    /// Returns `(volume, clamped_voxel_count)`.
    fn apply_volume(&self, v: &PyVolume) -> (PyVolume, usize) {
        let (out, n) = self.inner.apply_volume(&v.inner);
        (out.into(), n)
    }

    fn apply_inverse_volume(&self, v: &PyVolume) -> (PyVolume, usize) {
        let (out, n) = self.inner.apply_inverse_volume(&v.inner);
        (out.into(), n)
    }

    #[getter]
    fn p1(&self) -> [f64; 2] {
        self.inner.params().p1
    }

    #[getter]
    fn p2(&self) -> [f64; 2] {
        self.inner.params().p2
    }
}

/// Draws a transform pair from the default priors (or identity ones).
#[pyfunction]
#[pyo3(signature = (seed, pivot, identity = false))]
fn sample_transform(seed: u64, pivot: [f64; 3], identity: bool) -> PyResult<(PyRigid, PyCurve)> {
    let priors = if identity {
        TransformPriors::identity()
    } else {
        TransformPriors::default()
    };
    let (rigid, curve) = tf::sample_transform(&priors, seed, pivot).py()?;
    Ok((PyRigid { inner: rigid }, PyCurve { inner: curve }))
}

#[pyclass(name = "OracleLocalizer", module = "voxloc_py")]
pub struct PyOracle {
    inner: CoreOracle,
}

#[pymethods]
impl PyOracle {
    #[new]
    #[pyo3(signature = (jitter_std = 0.0, failure_rate = 0.0, bias = [0.0, 0.0, 0.0], seed = 0))]
    fn new(jitter_std: f64, failure_rate: f64, bias: [f64; 3], seed: u64) -> PyResult<Self> {
        let cfg = OracleLocalizerConfig {
            jitter_std,
            failure_rate,
            bias,
            seed,
            ..Default::default()
        };
        Ok(Self {
            inner: CoreOracle::new(cfg).py()?,
        })
    }

    #[pyo3(signature = (input, truth, stochastic = false, seed = 0))]
    fn predict(&self, input: &PyVolume, truth: [f64; 3], stochastic: bool, seed: u64) -> PyResult<PyVolume> {
        use voxloc::predictors::Localizer;
        Ok(self.inner.predict(&input.inner, Some(truth), stochastic, seed).py()?.into())
    }
}

#[pyfunction]
fn mad(positions: Vec<[f64; 3]>) -> PyResult<f64> {
    unc::mad(&positions).py()
}

#[pyfunction]
fn mean_variance(samples: Vec<PyRef<'_, PyVolume>>) -> PyResult<(PyVolume, PyVolume)> {
    let vols: Vec<Volume3> = samples.iter().map(|v| v.inner.clone()).collect();
    let (m, v) = unc::mean_variance(&vols).py()?;
    Ok((m.into(), v.into()))
}

#[pyfunction]
#[pyo3(signature = (center, dims, spacing = [1.0, 1.0, 1.0], sigma = 1.5, cutoff = 0.05))]
fn gaussian_heatmap(center: [f64; 3], dims: [usize; 3], spacing: [f64; 3], sigma: f64, cutoff: f64) -> PyResult<PyVolume> {
    let spec = HeatmapSpec { sigma, cutoff };
    Ok(heatmap::gaussian_heatmap(&spec, center, dims, spacing).py()?.into())
}

#[pyfunction]
#[pyo3(signature = (pred, gt, fg_weight = heatmap::DEFAULT_FG_WEIGHT))]
fn wmse(pred: &PyVolume, gt: &PyVolume, fg_weight: f64) -> PyResult<(f64, PyVolume)> {
    let (loss, grad) = heatmap::wmse(&pred.inner, &gt.inner, fg_weight).py()?;
    Ok((loss, grad.into()))
}

#[pyfunction]
fn dice_score(a: &PyVolume, b: &PyVolume) -> PyResult<f64> {
    heatmap::dice_score(&a.inner, &b.inner).py()
}

#[pyfunction]
fn rejection_stats<'py>(py: Python<'py>, values: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let s = unc::rejection_stats(&values).py()?;
    let d = PyDict::new(py);
    d.set_item("q1", s.q1)?;
    d.set_item("median", s.median)?;
    d.set_item("q3", s.q3)?;
    d.set_item("iqr", s.iqr)?;
    d.set_item("upper_fence", s.upper_fence)?;
    d.set_item("upper_whisker", s.upper_whisker)?;
    d.set_item("flagged", s.flagged)?;
    Ok(d)
}

fn mc_mode(name: &str) -> PyResult<McMode> {
    match name {
        "mcdo" => Ok(McMode::Mcdo),
        "tta" => Ok(McMode::Tta),
        "hybrid" => Ok(McMode::Hybrid),
        _ => Err(PyValueError::new_err(format!("unknown mode {name:?}"))),
    }
}

/// Runs one sampling mode with an oracle localizer and returns the summary
/// as a dict (`mad`, `final_target`, `argmax_positions`, `centroid`,
/// `mean_map`, `variance_map`).
#[pyfunction]
#[pyo3(signature = (localizer, volume, truth, mode = "mcdo", n_samples = 100, seed = 0, identity_priors = false))]
fn run_uncertainty<'py>(
    py: Python<'py>,
    localizer: &PyOracle,
    volume: &PyVolume,
    truth: [f64; 3],
    mode: &str,
    n_samples: usize,
    seed: u64,
    identity_priors: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = McConfig::new(mc_mode(mode)?, n_samples, seed);
    cfg.keep_samples = false;
    if identity_priors {
        cfg.priors = TransformPriors::identity();
    }
    let s = py
        .detach(|| unc::run_uncertainty(&localizer.inner, &volume.inner, Some(truth), &cfg))
        .py()?;
    let d = PyDict::new(py);
    d.set_item("mode", mode)?;
    d.set_item("mad", s.mad)?;
    d.set_item("final_target", s.final_target)?;
    d.set_item("argmax_positions", s.argmax_positions.clone())?;
    d.set_item("centroid", s.centroid)?;
    d.set_item("mean_map", PyVolume::from(s.mean_map))?;
    d.set_item("variance_map", PyVolume::from(s.variance_map))?;
    Ok(d)
}

/// Generates a phantom around the default anatomy for `dims`; returns a
/// dict with `image`, `left_mask`, `right_mask` and `targets`.
#[pyfunction]
#[pyo3(signature = (dims = [192, 192, 192], seed = 0, ventricle_enlargement = 0.0, noise_std = 0.0, bias_field_amplitude = 0.0, crop_extent = [64, 64, 64]))]
fn generate_phantom<'py>(
    py: Python<'py>,
    dims: [usize; 3],
    seed: u64,
    ventricle_enlargement: f64,
    noise_std: f64,
    bias_field_amplitude: f64,
    crop_extent: [usize; 3],
) -> PyResult<Bound<'py, PyDict>> {
    let spec = PhantomSpec {
        seed,
        ventricle_enlargement,
        noise_std,
        bias_field_amplitude,
        crop_extent,
        ..PhantomSpec::default_for_dims(dims, 1.0)
    };
    let case = py.detach(|| ph::generate_phantom(&spec)).py()?;
    let d = PyDict::new(py);
    d.set_item("left_target", case.targets[0].position)?;
    d.set_item("right_target", case.targets[1].position)?;
    d.set_item("image", PyVolume::from(case.image))?;
    d.set_item("left_mask", PyVolume::from(case.left_mask))?;
    d.set_item("right_mask", PyVolume::from(case.right_mask))?;
    Ok(d)
}

/// Two-stage pipeline with a mask-reading segmenter and an oracle
/// localizer; returns `{"left": [i,j,k] | None, "right": ..., "labels_swapped": bool}`.
#[pyfunction]
#[pyo3(signature = (image, left_mask, right_mask, left_target, right_target, localizer, coarse_dims = [80, 80, 80], crop_extent = [64, 64, 64]))]
#[allow(clippy::too_many_arguments)]
fn run_pipeline<'py>(
    py: Python<'py>,
    image: &PyVolume,
    left_mask: &PyVolume,
    right_mask: &PyVolume,
    left_target: [f64; 3],
    right_target: [f64; 3],
    localizer: &PyOracle,
    coarse_dims: [usize; 3],
    crop_extent: [usize; 3],
) -> PyResult<Bound<'py, PyDict>> {
    let seg = TruthSegmenter::new(left_mask.inner.clone(), right_mask.inner.clone()).py()?;
    let cfg = PipelineConfig {
        coarse_dims,
        crop_extent,
        ..Default::default()
    };
    let truth = SideTargets {
        left: left_target,
        right: right_target,
    };
    let result = py
        .detach(|| Pipeline::new(cfg, &seg, &localizer.inner).and_then(|p| p.run(&image.inner, Some(&truth))))
        .py()?;
    let d = PyDict::new(py);
    d.set_item("left", result.target(Side::Left))?;
    d.set_item("right", result.target(Side::Right))?;
    d.set_item("labels_swapped", result.labels_swapped)?;
    Ok(d)
}

fn load_config(path: Option<PathBuf>, json: Option<&str>) -> PyResult<ExperimentConfig> {
    match (path, json) {
        (Some(p), None) => ExperimentConfig::load(&p).py(),
        (None, Some(s)) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
        (None, None) => Ok(ExperimentConfig::default()),
        _ => Err(PyValueError::new_err("pass either a config path or a JSON string")),
    }
}

/// Generates the cohort described by an experiment config; returns the number of cases.
#[pyfunction]
#[pyo3(signature = (config_path = None, config_json = None))]
fn generate(py: Python<'_>, config_path: Option<PathBuf>, config_json: Option<&str>) -> PyResult<usize> {
    let cfg = load_config(config_path, config_json)?;
    py.detach(|| cmd_generate(&cfg)).py().map(|m| m.cases.len())
}

/// Runs an experiment; returns `(results_csv_path, failed_case_ids)`.
#[pyfunction]
#[pyo3(signature = (config_path = None, config_json = None))]
fn run(py: Python<'_>, config_path: Option<PathBuf>, config_json: Option<&str>) -> PyResult<(PathBuf, Vec<String>)> {
    let cfg = load_config(config_path, config_json)?;
    let out = py.detach(|| cmd_run(&cfg)).py()?;
    Ok((out.results_path, out.failed_cases))
}

/// Whisker analysis; returns the report as a JSON string.
#[pyfunction]
fn analyze(results: PathBuf, out_dir: PathBuf) -> PyResult<String> {
    let report = cmd_analyze(&results, &out_dir).py()?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn voxloc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyRigid>()?;
    m.add_class::<PyCurve>()?;
    m.add_class::<PyOracle>()?;
    m.add_function(wrap_pyfunction!(sample_transform, m)?)?;
    m.add_function(wrap_pyfunction!(mad, m)?)?;
    m.add_function(wrap_pyfunction!(mean_variance, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(wmse, m)?)?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(rejection_stats, m)?)?;
    m.add_function(wrap_pyfunction!(run_uncertainty, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    Ok(())
}
