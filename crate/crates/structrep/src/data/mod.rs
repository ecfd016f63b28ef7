//! Dataset ingestion and sampling: newline-delimited JSON label files,
//! +/-1 label vectors built against a template's finding keys, report
//! sentence sampling for contrastive pairs, k-shot episodes, and the
//! synthetic generator.
//!
//! Label file schema (one JSON object per line):
//!
//! ```json
//! {"image_id": "img_00001",
//!  "findings": [{"attribute": "opacity", "location": "left lung", "polarity": 1}],
//!  "sentences": [{"text": "there is opacity in the left lung.", "has_finding": true}]}
//! ```
//!
//! Polarity +1 marks a positive finding, -1 an explicit negative, and 0 an
//! unknown: the matching class is excluded from losses and metrics via the
//! validity mask. Classes never mentioned default to negative (closed world).

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::template::TemplateTree;

mod augment;
mod episode;
pub mod image;
mod synth;

pub use augment::{augment, sample_crop_rect, AugmentationConfig, CropRect};
pub use episode::{sample_episode, Episode, EpisodeSpec, SamplingMode};
pub use image::Image;
pub use synth::{synth_generate, SynthMode, SynthSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Finding {
    pub attribute: String,
    pub location: String,
    pub polarity: i8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSentence {
    pub text: String,
    pub has_finding: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub findings: Vec<Finding>,
    pub sentences: Vec<ReportSentence>,
}

/// Per-image labels: y in {+1, -1} per class plus a validity mask. Masked
/// entries contribute to no loss or metric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    pub y: Vec<i8>,
    pub valid: Vec<bool>,
}

impl LabelVector {
    pub fn all_negative(num_classes: usize) -> Self {
        LabelVector {
            y: vec![-1; num_classes],
            valid: vec![true; num_classes],
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// What to do with findings whose (attribute, location) matches no class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownFinding {
    #[default]
    Warn,
    Error,
}

/// Build the label vector for one record. Every finding is either mapped to
/// a class or reported back as unmapped; nothing is silently dropped.
pub fn build_label_vector(
    record: &ImageRecord,
    tree: &TemplateTree,
) -> (LabelVector, Vec<Finding>) {
    let mut labels = LabelVector::all_negative(tree.num_classes());
    let mut unmapped = Vec::new();
    for finding in &record.findings {
        match tree.class_for_key(&finding.attribute, &finding.location) {
            Some(class) => match finding.polarity {
                1 => labels.y[class] = 1,
                -1 => labels.y[class] = -1,
                0 => labels.valid[class] = false,
                other => {
                    log::warn!(
                        "{}: polarity {other} for ({}, {}) treated as unknown",
                        record.image_id,
                        finding.attribute,
                        finding.location
                    );
                    labels.valid[class] = false;
                }
            },
            None => unmapped.push(finding.clone()),
        }
    }
    (labels, unmapped)
}

#[derive(Debug, Clone)]
pub struct IndexedRecord {
    pub record: ImageRecord,
    pub labels: LabelVector,
    pub image_path: PathBuf,
}

/// Immutable dataset index; pixels load lazily through `load_pixels`.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub records: Vec<IndexedRecord>,
    pub num_classes: usize,
    pub target_size: usize,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Load and preprocess pixels for a record: read, resize/pad to the
    /// target resolution, values in [-1, 1].
    pub fn load_pixels(&self, index: usize) -> Result<Image> {
        let rec = &self.records[index];
        let raw = image::read_png(&rec.image_path)?;
        Ok(image::resize_and_pad(&raw, self.target_size))
    }

    /// All report sentences in record order (for vocabulary building).
    pub fn all_sentences(&self) -> Vec<&str> {
        self.records
            .iter()
            .flat_map(|r| r.record.sentences.iter().map(|s| s.text.as_str()))
            .collect()
    }
}

/// Parse a newline-delimited JSON label file, match findings against the
/// template, and verify every referenced image exists.
///
/// Returns the index plus human-readable warnings (unmapped findings).
pub fn load_dataset(
    label_path: &Path,
    image_root: &Path,
    tree: &TemplateTree,
    target_size: usize,
    unknown: UnknownFinding,
) -> Result<(DatasetIndex, Vec<String>)> {
    let text = std::fs::read_to_string(label_path)
        .map_err(|e| Error::io(label_path.display().to_string(), e))?;
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut missing = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!(
                "{}:{}: {e}",
                label_path.display(),
                lineno + 1
            ))
        })?;
        if !seen_ids.insert(record.image_id.clone()) {
            return Err(Error::Data(format!(
                "duplicate image_id `{}` in {}",
                record.image_id,
                label_path.display()
            )));
        }
        let (labels, unmapped) = build_label_vector(&record, tree);
        for f in unmapped {
            let msg = format!(
                "{}: finding ({}, {}) matches no template class",
                record.image_id, f.attribute, f.location
            );
            if unknown == UnknownFinding::Error {
                return Err(Error::Data(msg));
            }
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let image_path = image_root.join(format!("{}.png", record.image_id));
        if !image_path.exists() {
            missing.push(record.image_id.clone());
        }
        records.push(IndexedRecord {
            record,
            labels,
            image_path,
        });
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{} image file(s) missing under {}: {}",
            missing.len(),
            image_root.display(),
            missing.join(", ")
        )));
    }
    Ok((
        DatasetIndex {
            records,
            num_classes: tree.num_classes(),
            target_size,
        },
        warnings,
    ))
}

/// Sample the report sentence used as the text side of a contrastive pair:
/// uniformly among finding sentences when any exist, otherwise uniformly
/// over the whole report.
pub fn sample_report_sentence<'a>(record: &'a ImageRecord, rng: &mut ChaCha8Rng) -> Result<&'a str> {
    if record.sentences.is_empty() {
        return Err(Error::Data(format!(
            "{}: record has no report sentences",
            record.image_id
        )));
    }
    let finding_sentences: Vec<&ReportSentence> = record
        .sentences
        .iter()
        .filter(|s| s.has_finding)
        .collect();
    let pool_len = if finding_sentences.is_empty() {
        record.sentences.len()
    } else {
        finding_sentences.len()
    };
    let pick = rng.gen_range(0..pool_len);
    Ok(if finding_sentences.is_empty() {
        &record.sentences[pick].text
    } else {
        &finding_sentences[pick].text
    })
}

/// Derive a child seed from (base seed, stream label, index) so batch
/// composition is a pure function of them.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for b in label.bytes() {
        h = splitmix64(h ^ b as u64);
    }
    splitmix64(h ^ index)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
