//! Python bindings: noise schedules, patch layouts, run configuration,
//! synthetic corpora, trained pipelines, the recognizer and ablation reports.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use decipher_core::config::RunConfig;
use decipher_core::diffusion::{forward_sample, reverse_step, NoiseSchedule};
use decipher_core::denoiser::TrainOptions;
use decipher_core::evaluator::{quantize, train_ocr, Classifier, Decipherer, Ranker};
use decipher_core::glyph_data::{synth_corpus, SynthSpec};
use decipher_core::lss::{build_patch_layout, PatchLayout};
use decipher_core::pipeline::{
    exemplar, load_condition, load_corpus, load_reference, prepare, save_reference, train_initial_model, train_refiner_model, AblationReport,
    Pipeline, RunPaths, SamplerMode,
};
use decipher_core::archive::ParameterArchive;
use decipher_core::tensor::Tensor;
use decipher_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyIOError::new_err(e.to_string()),
        Error::Shape(_) | Error::InvalidArgument(_) | Error::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn vector(values: Vec<f64>) -> PyResult<Tensor<f64>> {
    Tensor::new(&[values.len()], values).map_err(py_err)
}

#[pyclass(name = "NoiseSchedule", module = "decipher", frozen)]
struct PyNoiseSchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PyNoiseSchedule {
    #[new]
    #[pyo3(signature = (steps = 1000, beta_start = 1e-4, beta_end = 0.02))]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        Ok(Self { inner: NoiseSchedule::linear(steps, beta_start, beta_end).map_err(py_err)? })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.inner.check_t(t).map_err(py_err)?;
        Ok(self.inner.beta(t))
    }

    fn alpha(&self, t: usize) -> PyResult<f64> {
        self.inner.check_t(t).map_err(py_err)?;
        Ok(self.inner.alpha(t))
    }

    fn gamma(&self, t: usize) -> PyResult<f64> {
        self.inner.check_t(t).map_err(py_err)?;
        Ok(self.inner.gamma(t))
    }

    fn gammas(&self) -> Vec<f64> {
        self.inner.gammas().to_vec()
    }

    /// Noise a flat signal to step `t`.
    fn forward_sample(&self, x0: Vec<f64>, t: usize, eps: Vec<f64>) -> PyResult<Vec<f64>> {
        let out = forward_sample(&vector(x0)?, t, &vector(eps)?, &self.inner).map_err(py_err)?;
        Ok(out.into_data())
    }

    /// One reverse update of a flat signal given the predicted noise and a fresh draw `z`.
    fn reverse_step(&self, xt: Vec<f64>, eps_hat: Vec<f64>, t: usize, z: Vec<f64>) -> PyResult<Vec<f64>> {
        let out = reverse_step(&vector(xt)?, &vector(eps_hat)?, t, &self.inner, &vector(z)?).map_err(py_err)?;
        Ok(out.into_data())
    }

    fn __repr__(&self) -> String {
        format!("NoiseSchedule(steps={})", self.inner.steps())
    }
}

#[pyclass(name = "PatchLayout", module = "decipher", frozen)]
struct PyPatchLayout {
    inner: PatchLayout,
}

#[pymethods]
impl PyPatchLayout {
    #[new]
    fn new(height: usize, width: usize, patch: usize, stride: usize) -> PyResult<Self> {
        Ok(Self { inner: build_patch_layout(height, width, patch, stride).map_err(py_err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.count()
    }

    /// `(top, left)` of every patch.
    fn origins(&self) -> Vec<(usize, usize)> {
        self.inner.origins().to_vec()
    }

    /// Number of patches covering pixel `(y, x)`.
    fn coverage(&self, y: usize, x: usize) -> PyResult<u32> {
        if y >= self.inner.height || x >= self.inner.width {
            return Err(PyValueError::new_err(format!("pixel ({y}, {x}) outside the image")));
        }
        Ok(self.inner.coverage(y, x))
    }
}

/// Mean Euclidean length of `(dy, dx)` displacements.
#[pyfunction]
fn offset_loss(offsets: Vec<(f64, f64)>) -> PyResult<f64> {
    let flat: Vec<f64> = offsets.iter().flat_map(|&(a, b)| [a, b]).collect();
    let t = Tensor::new(&[offsets.len(), 2], flat).map_err(py_err)?;
    decipher_core::refiner::offset_loss(&t).map_err(py_err)
}

#[pyclass(name = "RunConfig", module = "decipher")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        Self { inner: RunConfig::default() }
    }

    /// Scaled-down settings for a single CPU.
    #[staticmethod]
    fn desk() -> Self {
        Self { inner: RunConfig::desk() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = RunConfig::from_toml(text).map_err(py_err)?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = RunConfig::load(&path).map_err(py_err)?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    fn digest(&self) -> PyResult<String> {
        self.inner.digest().map_err(py_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: PathBuf) {
        self.inner.output_dir = dir;
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.patch_size
    }

    #[getter]
    fn stride(&self) -> usize {
        self.inner.stride
    }
}

/// Render a synthetic corpus to `out` and return its content digest.
#[pyfunction]
#[pyo3(signature = (out, categories = 60, variants = 8, styles = 20, image_size = 128, channels = 3, seed = 0))]
fn synth_data(out: PathBuf, categories: usize, variants: usize, styles: usize, image_size: usize, channels: usize, seed: u64) -> PyResult<String> {
    let spec = SynthSpec { categories, variants, styles, seed, image_size, channels };
    let corpus = synth_corpus(&spec).map_err(py_err)?;
    Ok(corpus.write(&out).map_err(py_err)?.digest)
}

fn train_options(cfg: &RunConfig) -> PyResult<TrainOptions<'static>> {
    Ok(TrainOptions { seed: cfg.seed, checkpoint_dir: None, resume: None, config_digest: cfg.digest().map_err(py_err)? })
}

/// Train the initial model for `mode` into the run directory; returns the steps taken.
#[pyfunction]
#[pyo3(signature = (config, mode = "lss"))]
fn train_initial(py: Python<'_>, config: &PyRunConfig, mode: &str) -> PyResult<usize> {
    let cfg = config.inner.clone();
    let mode: SamplerMode = mode.parse().map_err(py_err)?;
    let dir = RunPaths::new(&cfg.output_dir).initial(mode);
    let opts = train_options(&cfg)?;
    let archive = py.detach(|| {
        let prep = prepare(&cfg)?;
        let a = train_initial_model(&cfg, &prep.train, mode, opts)?;
        a.save(&dir)?;
        Ok(a)
    }).map_err(py_err)?;
    Ok(archive.manifest.training.step)
}

/// Train the refiner into the run directory; returns the steps taken.
#[pyfunction]
fn train_refiner(py: Python<'_>, config: &PyRunConfig) -> PyResult<usize> {
    let cfg = config.inner.clone();
    let dir = RunPaths::new(&cfg.output_dir).refiner();
    let opts = train_options(&cfg)?;
    let archive = py.detach(|| {
        let prep = prepare(&cfg)?;
        let a = train_refiner_model(&cfg, &prep.train, opts)?;
        a.save(&dir)?;
        save_reference(&dir, &exemplar(&prep.train)?)?;
        Ok(a)
    }).map_err(py_err)?;
    Ok(archive.manifest.training.step)
}

/// Train the recognizer into the run directory; returns `(held_in, canonical)` accuracy.
#[pyfunction]
fn train_recognizer(py: Python<'_>, config: &PyRunConfig) -> PyResult<(f64, f64)> {
    let cfg = config.inner.clone();
    let dir = RunPaths::new(&cfg.output_dir).classifier();
    py.detach(|| {
        let corpus = load_corpus(&cfg)?;
        let mut t = train_ocr(&corpus, &cfg.classifier, cfg.seed)?;
        t.archive.manifest.config_digest = cfg.digest()?;
        t.archive.save(&dir)?;
        Ok((t.held_in_accuracy, t.canonical_accuracy))
    })
    .map_err(py_err)
}

fn load_archive(path: &std::path::Path) -> PyResult<ParameterArchive> {
    ParameterArchive::load(path).map_err(py_err)
}

#[pyclass(name = "Pipeline", module = "decipher", frozen)]
struct PyPipeline {
    inner: Pipeline,
    config: RunConfig,
    refine: bool,
}

#[pymethods]
impl PyPipeline {
    /// Load the trained initial model (and refiner) from the config's run directory.
    #[new]
    #[pyo3(signature = (config, mode = "lss", refine = true))]
    fn new(config: &PyRunConfig, mode: &str, refine: bool) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let mode: SamplerMode = mode.parse().map_err(py_err)?;
        let paths = RunPaths::new(&cfg.output_dir);
        let initial = load_archive(&paths.initial(mode))?;
        let refiner = if refine {
            let dir = paths.refiner();
            Some((load_archive(&dir)?, load_reference(&dir, cfg.channels).map_err(py_err)?))
        } else {
            None
        };
        let inner = Pipeline::new(&cfg, mode, &initial, refiner.as_ref().map(|(a, r)| (a, r.clone()))).map_err(py_err)?;
        Ok(Self { inner, config: cfg, refine })
    }

    /// Decipher the glyph image at `path`; returns 8-bit grayscale rows.
    fn decipher(&self, py: Python<'_>, path: PathBuf, seed: u64) -> PyResult<Vec<Vec<u8>>> {
        let img = py.detach(|| self.run(&path, seed))?;
        let gray = img.to_gray8();
        let w = gray.width() as usize;
        Ok(gray.into_raw().chunks(w).map(<[u8]>::to_vec).collect())
    }

    /// Decipher `path` and save the result as PNG at `out`.
    fn decipher_to(&self, py: Python<'_>, path: PathBuf, out: PathBuf, seed: u64) -> PyResult<()> {
        let img = py.detach(|| self.run(&path, seed))?;
        img.save_png(&out).map_err(py_err)
    }

    #[getter]
    fn digest(&self) -> String {
        Decipherer::digest(&self.inner)
    }
}

impl PyPipeline {
    fn run(&self, path: &std::path::Path, seed: u64) -> PyResult<decipher_core::image::GlyphImage> {
        let cond = load_condition(path, self.config.image_size, self.config.channels).map_err(py_err)?;
        self.inner.run(&cond, seed, self.refine).map_err(py_err)
    }
}

#[pyclass(name = "Classifier", module = "decipher", frozen)]
struct PyClassifier {
    inner: Classifier,
    channels: usize,
}

#[pymethods]
impl PyClassifier {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let inner = Classifier::load(&dir).map_err(py_err)?;
        let channels = inner.spec.config.image_channels;
        Ok(Self { inner, channels })
    }

    #[getter]
    fn categories(&self) -> Vec<String> {
        self.inner.categories().to_vec()
    }

    /// The `top` most probable categories for the image at `path`.
    #[pyo3(signature = (path, top = 5))]
    fn rank(&self, path: PathBuf, top: usize) -> PyResult<Vec<(String, f64)>> {
        let img = load_condition(&path, self.inner.spec.config.image_size, self.channels).map_err(py_err)?;
        let img = quantize(&img).map_err(py_err)?;
        let r = self.inner.rank(&img).map_err(py_err)?;
        Ok(r.entries.into_iter().take(top).collect())
    }
}

#[pyclass(name = "AblationReport", module = "decipher", frozen)]
struct PyAblationReport {
    inner: AblationReport,
}

#[pymethods]
impl PyAblationReport {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: AblationReport::load(&path).map_err(py_err)? })
    }

    /// CSV table of top-k accuracy per arm.
    fn table(&self) -> String {
        self.inner.table()
    }

    /// `(name, passed, detail)` for each ordering check.
    fn checks(&self) -> PyResult<Vec<(String, bool, String)>> {
        Ok(self.inner.checks().map_err(py_err)?.into_iter().map(|c| (c.name, c.passed, c.detail)).collect())
    }

    fn top_k(&self, arm: &str) -> PyResult<Vec<(usize, f64)>> {
        let a = self.inner.arm(arm).ok_or_else(|| PyValueError::new_err(format!("no arm named {arm}")))?;
        Ok(a.ks.iter().copied().zip(a.top_k.iter().copied()).collect())
    }

    #[getter]
    fn multi_round_cumulative(&self) -> Vec<f64> {
        self.inner.multi_round_cumulative.clone()
    }
}

#[pymodule]
fn decipher(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNoiseSchedule>()?;
    m.add_class::<PyPatchLayout>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyPipeline>()?;
    m.add_class::<PyClassifier>()?;
    m.add_class::<PyAblationReport>()?;
    m.add_function(wrap_pyfunction!(offset_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synth_data, m)?)?;
    m.add_function(wrap_pyfunction!(train_initial, m)?)?;
    m.add_function(wrap_pyfunction!(train_refiner, m)?)?;
    m.add_function(wrap_pyfunction!(train_recognizer, m)?)?;
    Ok(())
}
