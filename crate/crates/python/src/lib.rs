//! Python module `crsynthnet`: tensors, configs, the generator and critic,
//! losses, metrics, training and the toy corpus.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crsynth::ablation::AblationSpec;
use crsynth::config::RunConfig;
use crsynth::data::{write_toy_corpus, Batch};
use crsynth::discriminator::Discriminator;
use crsynth::generator::Generator;
use crsynth::image::{ImageTensor, ValueRange};
use crsynth::losses::{critic_per_sample, gradient_penalty, similarity_loss, LossWeights, PerceptualExtractor};
use crsynth::metrics::{self, FeatureEmbedder};
use crsynth::nn::Ctx;
use crsynth::training::{run_training, save_checkpoint, ReduceLrOnPlateau, RunOptions, Trainer};
use crsynth::Error;

fn py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for crsynth::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Dense f64 array with a shape; values are stored flat in row-major order.
#[pyclass(name = "Tensor", module = "crsynthnet", unsendable, skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: crsynth::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: crsynth::Tensor::new(data, &shape).py()?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (shape, seed=0, low=-1.0, high=1.0))]
    fn uniform(shape: Vec<usize>, seed: u64, low: f64, high: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PyTensor {
            inner: crsynth::Tensor::rand_uniform(&shape, low, high, &mut rng),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.to_vec()
    }

    fn item(&self) -> PyResult<f64> {
        self.inner.item().py()
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn unit(t: &PyTensor) -> PyResult<ImageTensor> {
    ImageTensor::new(t.inner.clone(), ValueRange::Unit).py()
}

/// Complete run configuration, read from and written to TOML.
#[pyclass(name = "RunConfig", module = "crsynthnet", unsendable, skip_from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (manifest, tiny=true))]
    fn new(manifest: PathBuf, tiny: bool) -> Self {
        let inner = if tiny { RunConfig::tiny(manifest) } else { RunConfig::new(manifest) };
        PyRunConfig { inner }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::from_toml(text).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::load(&path).py()?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().py()
    }

    fn hash(&self) -> PyResult<String> {
        self.inner.hash().py()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py()
    }

    /// Selects an ablation setting by its table name, e.g. `No_FusionAtt`.
    fn set_ablation(&mut self, name: &str) -> PyResult<()> {
        self.inner.train.ablation =
            AblationSpec::by_name(name).ok_or_else(|| PyValueError::new_err(format!("unknown setting {name}")))?;
        Ok(())
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.train.epochs
    }

    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.train.epochs = v;
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.train.batch_size
    }

    #[setter]
    fn set_batch_size(&mut self, v: usize) {
        self.inner.train.batch_size = v;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.train.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.train.seed = v;
    }

    #[getter]
    fn manifest(&self) -> PathBuf {
        self.inner.data.manifest.clone()
    }

    #[setter]
    fn set_manifest(&mut self, v: PathBuf) {
        self.inner.data.manifest = v;
    }
}

fn ablation_of(name: Option<&str>) -> PyResult<AblationSpec> {
    match name {
        None => Ok(AblationSpec::default()),
        Some(n) => AblationSpec::by_name(n).ok_or_else(|| PyValueError::new_err(format!("unknown setting {n}"))),
    }
}

/// Generator with freshly initialised weights; inputs and outputs are in [-1, 1].
#[pyclass(name = "Generator", module = "crsynthnet", unsendable)]
pub struct PyGenerator {
    inner: Generator,
}

#[pymethods]
impl PyGenerator {
    #[new]
    #[pyo3(signature = (config, seed=0, ablation=None))]
    fn new(config: &PyRunConfig, seed: u64, ablation: Option<&str>) -> PyResult<Self> {
        Ok(PyGenerator {
            inner: Generator::new(&config.inner.generator, &ablation_of(ablation)?, seed).py()?,
        })
    }

    fn num_parameters(&self) -> usize {
        self.inner.store().num_trainable()
    }

    /// Evaluation-mode forward pass.
    fn forward(&self, s1_t1: &PyTensor, s1_t2: &PyTensor, s2_t1: &PyTensor) -> PyResult<PyTensor> {
        let out = crsynth::tensor::no_grad(|| {
            self.inner
                .forward(&s1_t1.inner, &s1_t2.inner, &s2_t1.inner, &mut Ctx::eval())
        })
        .py()?;
        Ok(PyTensor { inner: out })
    }
}

/// Multi-scale critic; `forward` returns one score map per scale.
#[pyclass(name = "Discriminator", module = "crsynthnet", unsendable)]
pub struct PyDiscriminator {
    inner: Discriminator,
}

#[pymethods]
impl PyDiscriminator {
    #[new]
    #[pyo3(signature = (config, seed=0, ablation=None))]
    fn new(config: &PyRunConfig, seed: u64, ablation: Option<&str>) -> PyResult<Self> {
        let c = &config.inner;
        Ok(PyDiscriminator {
            inner: Discriminator::new(&c.discriminator, &c.generator, &ablation_of(ablation)?, seed).py()?,
        })
    }

    fn num_parameters(&self) -> usize {
        self.inner.store().num_trainable()
    }

    fn forward(
        &self,
        candidate: &PyTensor,
        s1_t1: &PyTensor,
        s1_t2: &PyTensor,
        s2_t1: &PyTensor,
    ) -> PyResult<Vec<PyTensor>> {
        let maps = crsynth::tensor::no_grad(|| {
            self.inner
                .forward(&candidate.inner, &s1_t1.inner, &s1_t2.inner, &s2_t1.inner, false)
        })
        .py()?;
        Ok(maps.into_iter().map(|inner| PyTensor { inner }).collect())
    }
}

/// Generator, critic and optimizer state driven one batch at a time.
#[pyclass(name = "Trainer", module = "crsynthnet", unsendable)]
pub struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyRunConfig) -> PyResult<Self> {
        Ok(PyTrainer {
            inner: Trainer::new(&config.inner).py()?,
        })
    }

    /// One critic and one generator update; returns the loss components.
    fn train_step<'py>(
        &mut self,
        py: Python<'py>,
        s1_t1: &PyTensor,
        s1_t2: &PyTensor,
        s2_t1: &PyTensor,
        s2_t2: &PyTensor,
    ) -> PyResult<Bound<'py, PyDict>> {
        let batch = Batch {
            tile_ids: (0..s2_t2.inner.dim(0)).map(|i| format!("py_{i}")).collect(),
            s1_t1: s1_t1.inner.clone(),
            s1_t2: s1_t2.inner.clone(),
            s2_t1: s2_t1.inner.clone(),
            s2_t2: s2_t2.inner.clone(),
        };
        let l = self.inner.train_step(&batch).py()?;
        let d = PyDict::new(py);
        for (k, v) in [
            ("d_total", l.d_total),
            ("d_real", l.d_real),
            ("d_fake", l.d_fake),
            ("gp", l.gp),
            ("g_total", l.g_total),
            ("g_sim", l.g_sim),
            ("g_adv", l.g_adv),
        ] {
            d.set_item(k, v)?;
        }
        Ok(d)
    }

    #[getter]
    fn global_step(&self) -> u64 {
        self.inner.global_step
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &dir).py()
    }
}

/// Learning-rate halving on a higher-is-better metric.
#[pyclass(name = "PlateauScheduler", module = "crsynthnet")]
pub struct PyPlateau {
    inner: ReduceLrOnPlateau,
}

#[pymethods]
impl PyPlateau {
    #[new]
    #[pyo3(signature = (patience=10, factor=0.5))]
    fn new(patience: usize, factor: f64) -> Self {
        PyPlateau {
            inner: ReduceLrOnPlateau::new(patience, factor),
        }
    }

    fn step(&mut self, metric: f64, lr: f64) -> f64 {
        self.inner.step(metric, lr)
    }

    #[getter]
    fn reductions(&self) -> usize {
        self.inner.reductions
    }
}

#[pyfunction]
fn psnr(pred: &PyTensor, reference: &PyTensor) -> PyResult<f64> {
    metrics::psnr(&unit(pred)?, &unit(reference)?).py()
}

#[pyfunction]
fn ssim(pred: &PyTensor, reference: &PyTensor) -> PyResult<f64> {
    metrics::ssim(&unit(pred)?, &unit(reference)?).py()
}

#[pyfunction]
fn ms_ssim(pred: &PyTensor, reference: &PyTensor) -> PyResult<f64> {
    metrics::ms_ssim(&unit(pred)?, &unit(reference)?).py()
}

#[pyfunction]
fn mae(pred: &PyTensor, reference: &PyTensor) -> PyResult<f64> {
    metrics::mae(&unit(pred)?, &unit(reference)?).py()
}

#[pyfunction]
fn rmse(pred: &PyTensor, reference: &PyTensor) -> PyResult<f64> {
    metrics::rmse(&unit(pred)?, &unit(reference)?).py()
}

/// Fréchet distance between two sets of feature vectors.
#[pyfunction]
fn fid(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::fid(&a, &b).py()
}

/// Similarity loss on signed-range images with the default weights and the
/// configured perceptual extractor.
#[pyfunction]
fn similarity(config: &PyRunConfig, pred: &PyTensor, reference: &PyTensor) -> PyResult<f64> {
    let c = &config.inner;
    let ex = PerceptualExtractor::new(&c.perceptual, c.generator.opt_channels).py()?;
    similarity_loss(&pred.inner, &reference.inner, &c.losses, &ex)
        .and_then(|t| t.item())
        .py()
}

/// Gradient penalty of the linear critic `x ↦ Σ w·x` between two batches.
#[pyfunction]
#[pyo3(signature = (weights, real, fake, seed=0))]
fn linear_gradient_penalty(weights: &PyTensor, real: &PyTensor, fake: &PyTensor, seed: u64) -> PyResult<f64> {
    let w = weights.inner.clone();
    let critic = |x: &crsynth::Tensor| -> crsynth::Result<crsynth::Tensor> {
        let n = x.dim(0);
        let per = x.mul(&w.broadcast_to(x.shape())?)?.reshape(&[n, x.numel() / n])?;
        per.sum_axes(&[1], false)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gradient_penalty(&critic, &real.inner, &fake.inner, &mut rng)
        .and_then(|t| t.item())
        .py()
}

/// Critic output averaged per sample over every score map.
#[pyfunction]
fn critic_scores(maps: Vec<PyRef<'_, PyTensor>>) -> PyResult<Vec<f64>> {
    let maps: Vec<crsynth::Tensor> = maps.iter().map(|m| m.inner.clone()).collect();
    Ok(critic_per_sample(&maps).py()?.to_vec())
}

/// Writes a toy corpus and returns its hash.
#[pyfunction]
#[pyo3(signature = (out, n=8, size=64, seed=7, cloud=0.3, force=false))]
fn make_toy_corpus(out: PathBuf, n: usize, size: usize, seed: u64, cloud: f64, force: bool) -> PyResult<String> {
    Ok(write_toy_corpus(&out, n, size, seed, cloud, force).py()?.hash)
}

/// Full training run; returns epochs completed, steps and the best validation PSNR.
#[pyfunction]
#[pyo3(signature = (config, run_dir, resume=false, force=false))]
fn train<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    run_dir: PathBuf,
    resume: bool,
    force: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let opts = RunOptions {
        resume,
        force,
        ..RunOptions::default()
    };
    let out = run_training(&config.inner, &run_dir, &opts).py()?;
    let d = PyDict::new(py);
    d.set_item("epochs", out.epochs_completed)?;
    d.set_item("steps", out.global_step)?;
    d.set_item("best_epoch", out.best_epoch)?;
    d.set_item("best_psnr", out.best_metric)?;
    Ok(d)
}

/// Aggregate metrics for matching tiles of two directories.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, pred_dir: PathBuf, ref_dir: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::evaluate(&pred_dir, &ref_dir, &FeatureEmbedder::optical(), "prediction").py()?;
    let d = PyDict::new(py);
    d.set_item("tiles", r.per_tile.len())?;
    d.set_item("psnr", r.aggregate.psnr)?;
    d.set_item("ssim", r.aggregate.ssim)?;
    d.set_item("ms_ssim", r.aggregate.ms_ssim)?;
    d.set_item("mae", r.aggregate.mae)?;
    d.set_item("rmse", r.aggregate.rmse)?;
    d.set_item("fid", r.fid)?;
    Ok(d)
}

/// Default loss weights as a dict.
#[pyfunction]
fn default_loss_weights<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
    let w = LossWeights::default();
    let d = PyDict::new(py);
    for (k, v) in [
        ("alpha", w.alpha),
        ("beta", w.beta),
        ("gamma_sim", w.gamma_sim),
        ("lambda_adv", w.lambda_adv),
        ("lambda_gp", w.lambda_gp),
    ] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

#[pymodule]
fn crsynthnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyDiscriminator>()?;
    m.add_class::<PyTrainer>()?;
    m.add_class::<PyPlateau>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(ms_ssim, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(linear_gradient_penalty, m)?)?;
    m.add_function(wrap_pyfunction!(critic_scores, m)?)?;
    m.add_function(wrap_pyfunction!(make_toy_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(default_loss_weights, m)?)?;
    m.add("PSNR_CAP", metrics::PSNR_CAP)?;
    Ok(())
}
