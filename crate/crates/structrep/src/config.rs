//! Experiment configuration (one JSON file per experiment, dot-path flag
//! overrides) and the run manifest written around every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentationConfig, SynthSpec};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    /// Dataset directory: images/ plus labels_<split>.jsonl.
    pub root: PathBuf,
    /// Synthetic generation spec; `synth-data` requires it.
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    /// Target resolution images are resized/padded to before encoding.
    #[serde(default = "default_target_size")]
    pub target_size: usize,
}

fn default_target_size() -> usize {
    224
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default)]
    pub augment: Option<AugmentationConfig>,
}

fn default_warmup() -> usize {
    1
}
fn default_weight_decay() -> f64 {
    0.1
}
fn default_eval_batch() -> usize {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Prompt,
    Random,
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InitMode::Prompt => write!(f, "prompt"),
            InitMode::Random => write!(f, "random"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneSection {
    pub shots: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default = "default_epoch_images_per_class")]
    pub epoch_images_per_class: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_init_modes")]
    pub init_modes: Vec<InitMode>,
    #[serde(default)]
    pub unfreeze_trunk: bool,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
}

fn default_gamma() -> f64 {
    50.0
}
fn default_epoch_images_per_class() -> usize {
    128
}
fn default_init_modes() -> Vec<InitMode> {
    vec![InitMode::Prompt, InitMode::Random]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    #[serde(default)]
    pub threshold: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            threshold: 0.0,
            gamma: default_gamma(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Template file; None means "use <data.root>/template.json" (the synth
    /// generator writes one).
    #[serde(default)]
    pub template: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub output_root: PathBuf,
}

impl ExperimentConfig {
    /// Load a config, apply `--set key.path=value` overrides, honor the
    /// output-root env override, and validate.
    pub fn load(path: &Path, overrides: &[String]) -> Result<(Self, serde_json::Value)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        if let Ok(root) = std::env::var("STRUCTREP_OUTPUT_ROOT") {
            value["output_root"] = serde_json::Value::String(root);
        }
        let config: ExperimentConfig = serde_json::from_value(value.clone())
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok((config, value))
    }

    pub fn validate(&self) -> Result<()> {
        if self.finetune.seeds.is_empty() {
            return Err(Error::Config("finetune.seeds must be non-empty".into()));
        }
        if self.finetune.shots.is_empty() {
            return Err(Error::Config("finetune.shots must be non-empty".into()));
        }
        if self.finetune.init_modes.is_empty() {
            return Err(Error::Config("finetune.init_modes must be non-empty".into()));
        }
        if let Some(template) = &self.template {
            if !template.exists() {
                return Err(Error::Config(format!(
                    "template file {} does not exist",
                    template.display()
                )));
            }
        }
        Ok(())
    }

    pub fn template_path(&self) -> PathBuf {
        self.template
            .clone()
            .unwrap_or_else(|| self.data.root.join("template.json"))
    }

    pub fn label_path(&self, split: &str) -> PathBuf {
        self.data.root.join(format!("labels_{split}.jsonl"))
    }

    pub fn image_dir(&self) -> PathBuf {
        self.data.root.join("images")
    }
}

/// Apply one `key.path=value` override to the raw JSON. The value parses as
/// JSON when possible, else as a string.
pub fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw_value) = spec.split_once('=').ok_or_else(|| {
        Error::Config(format!("override `{spec}` must look like key.path=value"))
    })?;
    let parsed: serde_json::Value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));
    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if i + 1 == segments.len() {
            match cursor {
                serde_json::Value::Object(map) => {
                    map.insert(seg.to_string(), parsed);
                    return Ok(());
                }
                _ => {
                    return Err(Error::Config(format!(
                        "override `{spec}`: `{seg}` is not an object field"
                    )))
                }
            }
        }
        cursor = match cursor {
            serde_json::Value::Object(map) => map
                .entry(seg.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default())),
            _ => {
                return Err(Error::Config(format!(
                    "override `{spec}`: `{seg}` is not an object"
                )))
            }
        };
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub status: String,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub checkpoints: Vec<PathBuf>,
    #[serde(default)]
    pub metrics_files: Vec<PathBuf>,
    #[serde(default)]
    pub wall_clock_seconds: Option<f64>,
    #[serde(default)]
    pub failed_cells: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            status: "running".into(),
            error: None,
            checkpoints: Vec::new(),
            metrics_files: Vec::new(),
            wall_clock_seconds: None,
            failed_cells: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}
