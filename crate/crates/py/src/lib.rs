//! Python bindings: images and distortions, loss functions, grids, models
//! and experiment planning.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use stabletrain::checkpoint::Checkpoint;
use stabletrain::config::ExperimentConfig;
use stabletrain::data::{normalize_batch, ChannelStats};
use stabletrain::distortions::{self as dist, DistortContext, DistortionSpec, RngStream};
use stabletrain::harness::{self, Scale};
use stabletrain::nn::{build_model, ModelConfig, ModelParams};
use stabletrain::objectives::{self, Likelihood};
use stabletrain::{Category, Error};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::NonFinite(_) => PyArithmeticError::new_err(msg),
        _ if e.category() == Category::Data => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for stabletrain::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Interleaved `height x width x channels` image with values in [0, 1].
#[pyclass(name = "Image", module = "stabletrain_py", from_py_object)]
#[derive(Clone)]
struct PyImage(stabletrain::Image);

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> PyResult<Self> {
        stabletrain::Image::new(height, width, channels, data).py().map(PyImage)
    }

    #[staticmethod]
    fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        PyImage(stabletrain::Image::filled(height, width, channels, value))
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.height(), self.0.width(), self.0.channels())
    }

    fn data(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn get(&self, y: usize, x: usize, c: usize) -> PyResult<f32> {
        let (h, w, ch) = self.shape();
        if y >= h || x >= w || c >= ch {
            return Err(PyValueError::new_err(format!("({y}, {x}, {c}) outside a {h}x{w}x{ch} image")));
        }
        Ok(self.0.get(y, x, c))
    }

    fn in_unit_range(&self) -> bool {
        self.0.in_unit_range()
    }

    fn __eq__(&self, other: &PyImage) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        let (h, w, c) = self.shape();
        format!("Image({h}x{w}x{c})")
    }
}

/// Applies a distortion such as `"gaussian:0.1"` or `"jpeg:30+rotation:15"`.
/// Offset crops need `crop_side`; FGSM needs a model and is not available
/// here.
#[pyfunction]
#[pyo3(signature = (spec, image, seed=0, fill=None, crop_side=None))]
fn distort(
    spec: &str,
    image: &PyImage,
    seed: u64,
    fill: Option<Vec<f32>>,
    crop_side: Option<usize>,
) -> PyResult<PyImage> {
    let spec: DistortionSpec = spec.parse().py()?;
    if spec.needs_model() {
        return Err(PyValueError::new_err("fgsm needs a model; use Model.fgsm"));
    }
    let ctx = DistortContext {
        fill: fill.as_deref(),
        gradient: None,
        crop_side,
    };
    dist::apply(&spec, &image.0, 0, &mut RngStream::new(seed), &ctx).py().map(PyImage)
}

#[pyfunction]
fn jpeg_compress(image: &PyImage, quality: u32) -> PyResult<PyImage> {
    dist::jpeg_compress(&image.0, quality).py().map(PyImage)
}

/// Peak signal-to-noise ratio in dB.
#[pyfunction]
fn psnr(reference: &PyImage, test: &PyImage) -> PyResult<f64> {
    stabletrain::psnr(&reference.0, &test.0).py()
}

fn likelihood(p: &[f64]) -> PyResult<Likelihood> {
    Likelihood::from_probs(p).py()
}

/// `KL(p || q)` in nats.
#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    objectives::kl_divergence(&likelihood(&p)?, &likelihood(&q)?).py()
}

#[pyfunction]
fn sym_kl(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    objectives::sym_kl(&likelihood(&p)?, &likelihood(&q)?).py()
}

#[pyfunction]
fn cross_entropy(p: Vec<f64>, label: usize) -> PyResult<f64> {
    objectives::cross_entropy(&likelihood(&p)?, label).py()
}

/// `n` values from `start` to `end`; `scale` is `"linear"` or `"log"`.
#[pyfunction]
#[pyo3(signature = (start, end, n, scale="linear"))]
fn grid_points(start: f64, end: f64, n: usize, scale: &str) -> PyResult<Vec<f64>> {
    let scale = match scale {
        "linear" => Scale::Linear,
        "log" => Scale::Log,
        other => return Err(PyValueError::new_err(format!("unknown scale {other:?}; use linear or log"))),
    };
    harness::grid_points(start, end, n, scale).py()
}

/// Run ids and training distortions an experiment configuration expands to.
#[pyfunction]
fn plan_grid(config: PathBuf) -> PyResult<Vec<(String, String)>> {
    let cfg = ExperimentConfig::load(&config).py()?;
    let plans = harness::plan_runs(&cfg.grid, &cfg.fine_tune, cfg.experiment.seed).py()?;
    Ok(plans.into_iter().map(|p| (p.id, p.config.distortion.to_string())).collect())
}

/// Residual classifier parameters.
#[pyclass(module = "stabletrain_py")]
struct Model(ModelParams<f32>);

impl Model {
    fn stats(&self, mean: Option<Vec<f64>>, std: Option<Vec<f64>>) -> PyResult<ChannelStats> {
        let c = self.0.config.channels;
        let stats = ChannelStats {
            mean: mean.unwrap_or_else(|| vec![0.0; c]),
            std: std.unwrap_or_else(|| vec![1.0; c]),
        };
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(PyValueError::new_err(format!("mean and std need {c} values")));
        }
        Ok(stats)
    }
}

#[pymethods]
impl Model {
    /// Freshly initialized desk-scale network.
    #[staticmethod]
    #[pyo3(signature = (classes, side, channels=3, seed=0))]
    fn init(classes: usize, side: usize, channels: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig {
            height: side,
            width: side,
            channels,
            ..ModelConfig::desk(classes)
        };
        build_model(&cfg, seed).py().map(Model)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        stabletrain::train::load_model(&path).py().map(Model)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint {
            model: self.0.clone(),
            optimizer: None,
            epoch: 0,
            val_score: 0.0,
        }
        .save(&path)
        .py()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.0.config.classes
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.num_parameters()
    }

    /// Class probabilities per image, normalized with the training split's
    /// per-channel `mean` and `std` (identity when omitted).
    #[pyo3(signature = (images, mean=None, std=None))]
    fn predict_proba(
        &self,
        images: Vec<PyImage>,
        mean: Option<Vec<f64>>,
        std: Option<Vec<f64>>,
    ) -> PyResult<Vec<Vec<f32>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let imgs: Vec<stabletrain::Image> = images.into_iter().map(|i| i.0).collect();
        let x = normalize_batch::<f32>(&imgs, &self.stats(mean, std)?).py()?;
        let p = self.0.predict_proba(&x).py()?;
        Ok(p.data().chunks(self.0.config.classes).map(<[f32]>::to_vec).collect())
    }

    /// FGSM copies of `images` at strength `epsilon`.
    #[pyo3(signature = (images, labels, epsilon, mean=None, std=None))]
    fn fgsm(
        &self,
        images: Vec<PyImage>,
        labels: Vec<usize>,
        epsilon: f64,
        mean: Option<Vec<f64>>,
        std: Option<Vec<f64>>,
    ) -> PyResult<Vec<PyImage>> {
        let stats = self.stats(mean, std)?;
        let grad = stabletrain::train::ModelGradient {
            model: &self.0,
            stats: &stats,
        };
        let imgs: Vec<stabletrain::Image> = images.into_iter().map(|i| i.0).collect();
        let out = dist::fgsm_batch(&imgs, &labels, &grad, epsilon).py()?;
        Ok(out.into_iter().map(PyImage).collect())
    }

    fn __repr__(&self) -> String {
        let c = &self.0.config;
        format!(
            "Model({}x{}x{} -> {} classes, {} parameters)",
            c.height,
            c.width,
            c.channels,
            c.classes,
            self.0.num_parameters()
        )
    }
}

#[pymodule]
fn stabletrain_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(distort, m)?)?;
    m.add_function(wrap_pyfunction!(jpeg_compress, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(sym_kl, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(grid_points, m)?)?;
    m.add_function(wrap_pyfunction!(plan_grid, m)?)?;
    Ok(())
}
