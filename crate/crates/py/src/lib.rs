//! Python bindings: corpus generation, embedder and diffusion training,
//! checkpoints, and the evaluation metrics.
//!
//! Every entry point that takes a config accepts `None` for the built-in
//! defaults or a [`Config`] parsed from TOML text or a file.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ::emobank as core;
use core::diffusion::{prepare_samples, quartile_accuracy, train_diffusion, DiffusionModel};
use core::embedder::{train_embedder, EmbedderModel};
use core::eval::{self, AblationArm};
use core::synthdata::{export_corpus, generate_corpus, import_corpus, ClipRecord};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: core::Error) -> PyErr {
    match e {
        core::Error::Io(_) => PyIOError::new_err(e.to_string()),
        core::Error::Training { .. } | core::Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn cfg_or_default(cfg: Option<&Config>) -> core::config::Config {
    cfg.map(|c| c.inner.clone()).unwrap_or_default()
}

/// Run configuration; sections `[data]`, `[embedder]`, `[bank]`,
/// `[diffusion]` and `[eval]`.
#[pyclass(module = "emobank", from_py_object)]
#[derive(Clone)]
pub struct Config {
    inner: core::config::Config,
}

#[pymethods]
impl Config {
    /// Defaults, optionally overridden by TOML text.
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => core::config::Config::from_toml_str(text).map_err(to_py)?,
            None => core::config::Config::default(),
        };
        Ok(Config { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Config { inner: core::config::Config::load(&path).map_err(to_py)? })
    }

    /// Canonical TOML with every key.
    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    /// Hex SHA-256 of the canonical TOML.
    fn hash(&self) -> String {
        self.inner.hash()
    }
}

/// A synthetic audio/visual corpus.
#[pyclass(module = "emobank", from_py_object)]
#[derive(Clone)]
pub struct Corpus {
    clips: Vec<ClipRecord>,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    #[pyo3(signature = (config = None, seed = 0))]
    fn generate(py: Python<'_>, config: Option<&Config>, seed: u64) -> PyResult<Self> {
        let cfg = cfg_or_default(config);
        let clips = py.detach(|| generate_corpus(&cfg.data, seed)).map_err(to_py)?;
        Ok(Corpus { clips })
    }

    /// Reads a directory written by `save` or `emobank gen-data`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Corpus { clips: import_corpus(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        export_corpus(&self.clips, &path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.clips.len()
    }

    /// `(clip_id, identity, emotion, intensity)` for every clip.
    fn labels(&self) -> Vec<(u32, u32, u32, u32)> {
        self.clips.iter().map(|c| (c.clip_id, c.identity, c.emotion, c.intensity)).collect()
    }
}

/// Cross-modal emotion embedder.
#[pyclass(module = "emobank")]
pub struct Embedder {
    model: EmbedderModel,
    /// Per-step training losses; empty for a loaded checkpoint.
    #[pyo3(get)]
    losses: Vec<f64>,
}

#[pymethods]
impl Embedder {
    #[staticmethod]
    #[pyo3(signature = (corpus, config = None, seed = 0))]
    fn train(py: Python<'_>, corpus: &Corpus, config: Option<&Config>, seed: u64) -> PyResult<Self> {
        let cfg = cfg_or_default(config);
        let run = py.detach(|| train_embedder(&corpus.clips, &cfg.embedder, seed)).map_err(to_py)?;
        Ok(Embedder { model: run.model, losses: run.losses })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Embedder { model: EmbedderModel::load(&path).map_err(to_py)?, losses: Vec::new() })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model.save(&path).map_err(to_py)
    }

    #[getter]
    fn d_s(&self) -> usize {
        self.model.d_s()
    }

    /// Prior mean of every clip with both streams present.
    fn prior_means(&self, py: Python<'_>, corpus: &Corpus) -> PyResult<Vec<Vec<f64>>> {
        py.detach(|| eval::ablation_means(&corpus.clips, &self.model, AblationArm::Both)).map_err(to_py)
    }

    /// Per-emotion clustering strength for each modality arm:
    /// `{"audio_only": {emotion: d_cls}, ...}`.
    fn ablation(&self, py: Python<'_>, corpus: &Corpus) -> PyResult<BTreeMap<String, BTreeMap<usize, f64>>> {
        let result = py.detach(|| eval::modality_ablation(&corpus.clips, &self.model)).map_err(to_py)?;
        Ok(result.per_emotion.into_iter().map(|(arm, per)| (arm.name().to_string(), per)).collect())
    }
}

/// Conditional denoiser with its emotion bank and discriminator.
#[pyclass(module = "emobank")]
pub struct Diffusion {
    model: DiffusionModel,
    /// Per-step total loss; empty for a loaded checkpoint.
    #[pyo3(get)]
    losses: Vec<f64>,
}

#[pymethods]
impl Diffusion {
    #[staticmethod]
    #[pyo3(signature = (corpus, embedder, config = None, seed = 0))]
    fn train(py: Python<'_>, corpus: &Corpus, embedder: &Embedder, config: Option<&Config>, seed: u64) -> PyResult<Self> {
        let cfg = cfg_or_default(config);
        let run = py
            .detach(|| {
                train_diffusion(&corpus.clips, &embedder.model, &cfg.diffusion, &cfg.bank, cfg.data.emotions, seed)
            })
            .map_err(to_py)?;
        let losses = run.curve.iter().map(|c| c.total).collect();
        Ok(Diffusion { model: run.model, losses })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Diffusion { model: DiffusionModel::load(&path).map_err(to_py)?, losses: Vec::new() })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model.save(&path).map_err(to_py)
    }

    /// Discriminator accuracy per noise quartile, lowest noise first.
    #[pyo3(signature = (corpus, embedder, evaluations = 1024, seed = 0))]
    fn quartile_accuracy(
        &self,
        py: Python<'_>,
        corpus: &Corpus,
        embedder: &Embedder,
        evaluations: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        py.detach(|| {
            let samples = prepare_samples(&corpus.clips, &embedder.model)?;
            quartile_accuracy(&self.model, &samples, evaluations, seed)
        })
        .map(|q| q.iter().map(|x| x.0).collect())
        .map_err(to_py)
    }

    /// Share of clips retrieving their emotion's majority bank code.
    fn code_purity(&self, py: Python<'_>, corpus: &Corpus, embedder: &Embedder) -> PyResult<f64> {
        py.detach(|| {
            let samples = prepare_samples(&corpus.clips, &embedder.model)?;
            eval::code_purity(&self.model, &samples)
        })
        .map(|p| p.purity)
        .map_err(to_py)
    }

    /// Generates latents for every emotion and returns
    /// `(emo_accuracy, swap_changed_fraction)`.
    #[pyo3(signature = (corpus, embedder, config = None, seed = 0))]
    fn sample_and_score(
        &self,
        py: Python<'_>,
        corpus: &Corpus,
        embedder: &Embedder,
        config: Option<&Config>,
        seed: u64,
    ) -> PyResult<(f64, f64)> {
        let cfg = cfg_or_default(config);
        py.detach(|| {
            let samples = prepare_samples(&corpus.clips, &embedder.model)?;
            let prompts = eval::prompts_from_samples(&samples, self.model.dims.emotions)?;
            let d = &cfg.data;
            let shape = [d.frames, d.latent_channels, d.latent_height, d.latent_width];
            eval::generate_and_score(
                &self.model,
                &samples,
                &prompts,
                cfg.eval.samples_per_emotion,
                &shape,
                cfg.diffusion.guidance_scale,
                seed,
            )
        })
        .map(|r| (r.accuracy, r.swap_changed))
        .map_err(to_py)
    }
}

/// Inter- over intra-cluster distance of labelled points.
#[pyfunction]
fn clustering_strength(points: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    if points.len() != labels.len() {
        return Err(PyValueError::new_err("points and labels differ in length"));
    }
    let labelled: Vec<(Vec<f64>, usize)> = points.into_iter().zip(labels).collect();
    eval::clustering_strength(&labelled).map_err(to_py)
}

/// Principal-plane coordinates and the variance each axis captures.
#[pyfunction]
fn project_2d(points: Vec<Vec<f64>>) -> PyResult<(Vec<[f64; 2]>, [f64; 2])> {
    let proj = eval::project_2d(&points).map_err(to_py)?;
    Ok((proj.coords, proj.explained))
}

/// Cosine-similarity InfoNCE of one anchor.
#[pyfunction]
fn info_nce(anchor: Vec<f64>, positive: Vec<f64>, negatives: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    core::embedder::info_nce(&anchor, &positive, &negatives, tau).map_err(to_py)
}

/// Runs the command-line tool in-process; returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        core::cli::run_args(&refs)
    })
}

#[pymodule]
#[pyo3(name = "emobank")]
fn emobank_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Corpus>()?;
    m.add_class::<Embedder>()?;
    m.add_class::<Diffusion>()?;
    m.add_function(wrap_pyfunction!(clustering_strength, m)?)?;
    m.add_function(wrap_pyfunction!(project_2d, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
