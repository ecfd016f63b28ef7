//! Python bindings: templates, losses, metrics, encoders, and the full
//! image-to-report inference pipeline.
//!
//! Build the cdylib with `cargo build -p structrep-py`, then import it as
//! `structrep_py` (see python/smoke_test.py for the path setup).

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use structrep::classifier::{
    classify, init_classifier, lses_loss_grad, predict_probabilities, LsesConfig, PromptClassifier,
};
use structrep::commands::load_inference;
use structrep::data::image::{read_png, resize_and_pad};
use structrep::data::SynthSpec;
use structrep::encoders::{EncoderBundle, EncoderConfig};
use structrep::error::Error;
use structrep::nn::ImageEncoderConfig;
use structrep::template::{
    expand_prompts, parse_template, parse_template_file, render_report, DecisionConfig,
    TemplateTree,
};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_)
        | Error::TemplateParse(_)
        | Error::TemplateValidation(_)
        | Error::Data(_)
        | Error::DimensionMismatch(_)
        | Error::UndefinedMetric(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn mask_or_default(mask: Option<Vec<bool>>, len: usize) -> PyResult<Vec<bool>> {
    match mask {
        Some(m) if m.len() == len => Ok(m),
        Some(m) => Err(PyValueError::new_err(format!(
            "mask has {} entries, expected {len}",
            m.len()
        ))),
        None => Ok(vec![true; len]),
    }
}

/// Log-sum-exp sign loss over {+1,-1} labels.
#[pyfunction]
#[pyo3(signature = (similarities, labels, gamma=50.0, mask=None))]
fn lses_loss(
    similarities: Vec<f64>,
    labels: Vec<i8>,
    gamma: f64,
    mask: Option<Vec<bool>>,
) -> PyResult<f64> {
    let valid = mask_or_default(mask, similarities.len())?;
    let cfg = LsesConfig { gamma };
    structrep::classifier::lses_loss(&similarities, &labels, &valid, &cfg).map_err(to_py_err)
}

/// Gradient of the loss w.r.t. each similarity.
#[pyfunction]
#[pyo3(signature = (similarities, labels, gamma=50.0, mask=None))]
fn lses_grad(
    similarities: Vec<f64>,
    labels: Vec<i8>,
    gamma: f64,
    mask: Option<Vec<bool>>,
) -> PyResult<Vec<f64>> {
    let valid = mask_or_default(mask, similarities.len())?;
    let cfg = LsesConfig { gamma };
    lses_loss_grad(&similarities, &labels, &valid, &cfg)
        .map(|(_, g)| g)
        .map_err(to_py_err)
}

/// Mann-Whitney ROC-AUC with tie handling; raises ValueError when only one
/// class is present.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<i8>) -> PyResult<f64> {
    structrep::eval::roc_auc(&scores, &labels).map_err(to_py_err)
}

/// Symmetric contrastive cross-entropy over a square logit matrix.
#[pyfunction]
fn contrastive_loss(logits: Vec<Vec<f64>>) -> PyResult<f64> {
    let rows = logits.len();
    let cols = logits.first().map(|r| r.len()).unwrap_or(0);
    if logits.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged logit matrix"));
    }
    let flat: Vec<f64> = logits.into_iter().flatten().collect();
    let matrix = ndarray::Array2::from_shape_vec((rows, cols), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    structrep::pretrain::contrastive_loss(&matrix).map_err(to_py_err)
}

/// Generate a synthetic dataset from a SynthSpec JSON; returns the summary
/// as JSON.
#[pyfunction]
fn synth_generate(spec_json: &str, out_dir: &str) -> PyResult<String> {
    let spec: SynthSpec =
        serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let summary =
        structrep::data::synth_generate(&spec, Path::new(out_dir)).map_err(to_py_err)?;
    serde_json::to_string_pretty(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// A validated report template.
#[pyclass]
struct Template {
    tree: TemplateTree,
}

#[pymethods]
impl Template {
    #[new]
    fn new(config_text: &str) -> PyResult<Self> {
        Ok(Template {
            tree: parse_template(config_text).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Template {
            tree: parse_template_file(&path).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.tree.num_classes()
    }

    /// Expanded prompt sentences in class order.
    fn prompts(&self) -> Vec<String> {
        expand_prompts(&self.tree).prompts
    }

    /// Render a similarity vector into report text.
    #[pyo3(signature = (scores, threshold=0.0, gamma=50.0))]
    fn render(&self, scores: Vec<f64>, threshold: f64, gamma: f64) -> PyResult<String> {
        let report = render_report(&self.tree, &scores, &DecisionConfig { threshold, gamma })
            .map_err(to_py_err)?;
        Ok(report.text())
    }

    /// Render with per-line provenance, as JSON.
    #[pyo3(signature = (scores, threshold=0.0, gamma=50.0))]
    fn render_json(&self, scores: Vec<f64>, threshold: f64, gamma: f64) -> PyResult<String> {
        let report = render_report(&self.tree, &scores, &DecisionConfig { threshold, gamma })
            .map_err(to_py_err)?;
        serde_json::to_string_pretty(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn to_json(&self) -> String {
        self.tree.to_config_json()
    }
}

/// An encoder pair with its projections into the shared space.
#[pyclass]
struct Bundle {
    inner: EncoderBundle,
}

impl Bundle {
    fn encode_png(&self, path: &Path) -> PyResult<Vec<f64>> {
        let raw = read_png(path).map_err(to_py_err)?;
        let pixels = resize_and_pad(&raw, self.inner.config.input_size);
        let emb = self.inner.encode_image(&pixels.to_array()).map_err(to_py_err)?;
        Ok(emb.as_array().to_vec())
    }
}

#[pymethods]
impl Bundle {
    /// Load a pretrained bundle checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Bundle {
            inner: structrep::encoders::load_bundle(&path).map_err(to_py_err)?,
        })
    }

    /// Small randomly initialized reference bundle with a vocabulary built
    /// from `corpus` (mainly for experimentation and tests).
    #[staticmethod]
    #[pyo3(signature = (corpus, seed=0, embed_dim=32, input_size=32))]
    fn new_random(corpus: Vec<String>, seed: u64, embed_dim: usize, input_size: usize) -> Self {
        let config = EncoderConfig {
            embed_dim,
            input_size,
            image: ImageEncoderConfig {
                in_channels: 1,
                channels: vec![8, 16, 32],
            },
            text_embed_dim: 32,
            text_hidden_dim: 64,
            max_tokens: 24,
        };
        Bundle {
            inner: EncoderBundle::new(config, corpus.iter().map(|s| s.as_str()), seed),
        }
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.config.input_size
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.config.embed_dim
    }

    /// Unit text embedding of a sentence.
    fn encode_text(&self, sentence: &str) -> PyResult<Vec<f64>> {
        let emb = self.inner.encode_text(sentence).map_err(to_py_err)?;
        Ok(emb.as_array().to_vec())
    }

    /// Unit image embedding of a grayscale PNG (resized and padded).
    fn encode_image_png(&self, path: PathBuf) -> PyResult<Vec<f64>> {
        self.encode_png(&path)
    }
}

/// Image -> structured report inference: encoders, prompt classifier, and
/// template rendering in one object.
#[pyclass]
struct Pipeline {
    bundle: EncoderBundle,
    classifier: PromptClassifier,
    tree: TemplateTree,
}

impl Pipeline {
    fn scores_for(&self, image: &Path) -> PyResult<Vec<f64>> {
        let raw = read_png(image).map_err(to_py_err)?;
        let pixels = resize_and_pad(&raw, self.bundle.config.input_size);
        let emb = self.bundle.encode_image(&pixels.to_array()).map_err(to_py_err)?;
        classify(&self.classifier, &emb).map_err(to_py_err)
    }
}

#[pymethods]
impl Pipeline {
    /// Load from a checkpoint (pretrain bundle -> zero-shot classifier;
    /// classifier checkpoints are used as saved) plus the template file.
    #[staticmethod]
    fn load(checkpoint: PathBuf, template: PathBuf) -> PyResult<Self> {
        let tree = parse_template_file(&template).map_err(to_py_err)?;
        let (bundle, classifier) = load_inference(&checkpoint, &tree).map_err(to_py_err)?;
        Ok(Pipeline {
            bundle,
            classifier,
            tree,
        })
    }

    /// Zero-shot pipeline from an in-memory bundle.
    #[staticmethod]
    fn zero_shot(bundle: &Bundle, template: &Template) -> PyResult<Self> {
        let prompts = expand_prompts(&template.tree);
        let classifier = init_classifier(&prompts, &bundle.inner).map_err(to_py_err)?;
        Ok(Pipeline {
            bundle: bundle.inner.clone(),
            classifier,
            tree: template.tree.clone(),
        })
    }

    /// Per-class cosine similarities for an image.
    fn scores_png(&self, image: PathBuf) -> PyResult<Vec<f64>> {
        self.scores_for(&image)
    }

    /// Per-class probabilities (group softmax / logistic).
    #[pyo3(signature = (image, gamma=50.0))]
    fn probabilities_png(&self, image: PathBuf, gamma: f64) -> PyResult<Vec<f64>> {
        let scores = self.scores_for(&image)?;
        predict_probabilities(&self.tree, &scores, gamma).map_err(to_py_err)
    }

    /// Rendered structured report text for an image.
    #[pyo3(signature = (image, threshold=0.0, gamma=50.0))]
    fn report_png(&self, image: PathBuf, threshold: f64, gamma: f64) -> PyResult<String> {
        let scores = self.scores_for(&image)?;
        let report = render_report(&self.tree, &scores, &DecisionConfig { threshold, gamma })
            .map_err(to_py_err)?;
        Ok(report.text())
    }
}

#[pymodule]
fn structrep_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(lses_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lses_grad, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_class::<Template>()?;
    m.add_class::<Bundle>()?;
    m.add_class::<Pipeline>()?;
    Ok(())
}
