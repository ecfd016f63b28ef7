//! Synthetic dataset generator: programmatic ground truth for the whole
//! pipeline. Attributes render as distinct glyph shapes, locations as grid
//! cells; a finding (attribute, location) is positive iff its glyph is drawn
//! inside its cell. Report sentences are generated from the prompt templates
//! with paraphrase noise (synonym substitution, filler clauses) so text and
//! image correlate without being string-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{write_png, Image};
use super::{derive_seed, Finding, ImageRecord, ReportSentence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeverityLevel {
    /// Matching key, e.g. "mild".
    pub label: String,
    /// Canonical template sentence, e.g. "There is mild cardiomegaly.".
    pub sentence: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthMode {
    /// Multi-label task: independent (attribute, location) findings.
    Product {
        attributes: Vec<String>,
        locations: Vec<String>,
        /// Restrict to these pairs; None means the full product.
        #[serde(default)]
        observed_pairs: Option<Vec<(String, String)>>,
        /// Probability that each pair is positive in an image.
        positive_prior: f64,
    },
    /// Exclusive grading task: every image carries exactly one level,
    /// rendered as a centered disk whose radius grows with the level.
    Severity {
        group_id: String,
        levels: Vec<SeverityLevel>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub mode: SynthMode,
    pub image_size: usize,
    pub count: usize,
    pub seed: u64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Per-pixel Gaussian noise sigma.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Paraphrase noise in report sentences (on by default; without it the
    /// text side degenerates to exact prompt matching).
    #[serde(default = "default_true")]
    pub paraphrase: bool,
}

fn default_val_fraction() -> f64 {
    0.15
}
fn default_test_fraction() -> f64 {
    0.15
}
fn default_noise() -> f64 {
    0.08
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSummary {
    pub template_path: PathBuf,
    pub label_paths: BTreeMap<String, PathBuf>,
    pub image_dir: PathBuf,
    /// class sentence -> split -> positive count.
    pub class_counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub images_per_split: BTreeMap<String, usize>,
}

const GLYPHS: [&str; 8] = [
    "disk", "square", "triangle", "ring", "cross", "diamond", "hbar", "vbar",
];

fn builtin_synonyms(attribute: &str) -> &'static [&'static str] {
    match attribute {
        "opacity" => &["haziness"],
        "effusion" => &["fluid"],
        "nodule" => &["mass"],
        "consolidation" => &["airspace disease"],
        "edema" => &["congestion"],
        _ => &[],
    }
}

const PRODUCT_TEMPLATES: [&str; 5] = [
    "{a} in the {l}.",
    "there is {a} in the {l}.",
    "{a} is seen in the {l}.",
    "findings suggest {a} in the {l}.",
    "the {l} shows {a}.",
];

const SEVERITY_TEMPLATES: [&str; 4] = [
    "the heart is {lbl} in size.",
    "there is {lbl} cardiomegaly.",
    "{lbl} cardiomegaly is noted.",
    "heart size is {lbl}.",
];

const HEALTHY_SENTENCES: [&str; 3] = [
    "no acute findings.",
    "the exam is unremarkable.",
    "lungs are clear without focal finding.",
];

const FILLER_SENTENCES: [&str; 3] = [
    "comparison is made to the prior exam.",
    "stable appearance since the last study.",
    "image quality is adequate.",
];

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synth spec: count must be >= 1".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("synth spec: image_size must be >= 8".into()));
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            return Err(Error::Config(
                "synth spec: val_fraction + test_fraction must leave room for train".into(),
            ));
        }
        match &self.mode {
            SynthMode::Product {
                attributes,
                locations,
                observed_pairs,
                positive_prior,
            } => {
                if attributes.is_empty() || locations.is_empty() {
                    return Err(Error::Config(
                        "synth spec: product mode needs attributes and locations".into(),
                    ));
                }
                if attributes.len() > GLYPHS.len() {
                    return Err(Error::Config(format!(
                        "synth spec: at most {} attributes supported (one glyph each)",
                        GLYPHS.len()
                    )));
                }
                if !(0.0..=1.0).contains(positive_prior) {
                    return Err(Error::Config(format!(
                        "synth spec: positive_prior must be in [0, 1], got {positive_prior}"
                    )));
                }
                if let Some(pairs) = observed_pairs {
                    for (a, l) in pairs {
                        if !attributes.contains(a) || !locations.contains(l) {
                            return Err(Error::Config(format!(
                                "synth spec: observed pair ({a}, {l}) not in declared lists"
                            )));
                        }
                    }
                }
                // Grid cells must not overlap: the grid layout guarantees it
                // as long as every location fits.
                let grid = grid_dims(locations.len());
                if grid.0 * grid.1 < locations.len() {
                    return Err(Error::Config("synth spec: grid layout overflow".into()));
                }
            }
            SynthMode::Severity { levels, .. } => {
                if levels.len() < 2 {
                    return Err(Error::Config(
                        "synth spec: severity mode needs >= 2 levels".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The template config this dataset is meant to be used with.
    pub fn template_json(&self) -> serde_json::Value {
        match &self.mode {
            SynthMode::Product {
                attributes,
                locations,
                observed_pairs,
                ..
            } => {
                let mut group = serde_json::json!({
                    "id": "findings",
                    "kind": "product_group",
                    "exclusive": false,
                    "negative_sentence": "No acute findings.",
                });
                if let Some(pairs) = observed_pairs {
                    group["pairs"] = serde_json::json!(pairs);
                }
                serde_json::json!({
                    "version": "1",
                    "attributes": attributes,
                    "locations": locations,
                    "groups": [group],
                })
            }
            SynthMode::Severity { group_id, levels } => serde_json::json!({
                "version": "1",
                "attributes": [],
                "locations": [],
                "groups": [{
                    "id": group_id,
                    "kind": "literal_group",
                    "exclusive": true,
                    "prompts": levels
                        .iter()
                        .map(|l| serde_json::json!({"label": l.label, "sentence": l.sentence}))
                        .collect::<Vec<_>>(),
                }],
            }),
        }
    }
}

pub(crate) fn grid_dims(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    (rows, cols)
}

/// Pixel rectangle of a location's grid cell.
pub fn cell_rect(image_size: usize, num_locations: usize, loc_index: usize) -> (usize, usize, usize, usize) {
    let (rows, cols) = grid_dims(num_locations);
    let cell_h = image_size / rows;
    let cell_w = image_size / cols;
    let r = loc_index / cols;
    let c = loc_index % cols;
    (r * cell_h, c * cell_w, cell_h, cell_w)
}

fn draw_glyph(img: &mut Image, glyph: &str, cy: f64, cx: f64, half: f64, intensity: f64) {
    let h = img.height as isize;
    let w = img.width as isize;
    let y0 = ((cy - half).floor() as isize).max(0);
    let y1 = ((cy + half).ceil() as isize).min(h - 1);
    let x0 = ((cx - half).floor() as isize).max(0);
    let x1 = ((cx + half).ceil() as isize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let inside = match glyph {
                "disk" => dy * dy + dx * dx <= half * half,
                "square" => dy.abs() <= half && dx.abs() <= half,
                "triangle" => {
                    dy >= -half && dy <= half && dx.abs() <= (dy + half) / 2.0
                }
                "ring" => {
                    let r2 = dy * dy + dx * dx;
                    r2 <= half * half && r2 >= (half * 0.55) * (half * 0.55)
                }
                "cross" => dy.abs() <= half * 0.3 || dx.abs() <= half * 0.3,
                "diamond" => dy.abs() + dx.abs() <= half,
                "hbar" => dy.abs() <= half * 0.3 && dx.abs() <= half,
                "vbar" => dx.abs() <= half * 0.3 && dy.abs() <= half,
                _ => false,
            };
            if inside {
                img.set(y as usize, x as usize, intensity);
            }
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn substitute_attribute<'a>(attribute: &'a str, paraphrase: bool, rng: &mut ChaCha8Rng) -> &'a str {
    if !paraphrase {
        return attribute;
    }
    let synonyms = builtin_synonyms(attribute);
    if !synonyms.is_empty() && rng.gen_bool(0.25) {
        synonyms[rng.gen_range(0..synonyms.len())]
    } else {
        attribute
    }
}

fn product_sentence(attribute: &str, location: &str, paraphrase: bool, rng: &mut ChaCha8Rng) -> String {
    let a = substitute_attribute(attribute, paraphrase, rng);
    let template = if paraphrase {
        PRODUCT_TEMPLATES[rng.gen_range(0..PRODUCT_TEMPLATES.len())]
    } else {
        PRODUCT_TEMPLATES[0]
    };
    template.replace("{a}", a).replace("{l}", location)
}

fn severity_sentence(label: &str, paraphrase: bool, rng: &mut ChaCha8Rng) -> String {
    let template = if paraphrase {
        SEVERITY_TEMPLATES[rng.gen_range(0..SEVERITY_TEMPLATES.len())]
    } else {
        SEVERITY_TEMPLATES[0]
    };
    template.replace("{lbl}", label)
}

/// Generate the dataset under `out_dir`: images/, one labels_<split>.jsonl
/// per split, the matching template.json, and a summary.json. Byte-identical
/// for a fixed spec.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir)
        .map_err(|e| Error::io(image_dir.display().to_string(), e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth", 0));
    let mut split_lines: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut class_counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut images_per_split: BTreeMap<String, usize> = BTreeMap::new();
    for split in ["train", "val", "test"] {
        split_lines.insert(split.to_string(), Vec::new());
        images_per_split.insert(split.to_string(), 0);
    }

    for i in 0..spec.count {
        let image_id = format!("img_{i:06}");
        let split = {
            let u: f64 = rng.gen();
            if u < spec.val_fraction {
                "val"
            } else if u < spec.val_fraction + spec.test_fraction {
                "test"
            } else {
                "train"
            }
        };

        let size = spec.image_size;
        let mut img = Image::new(size, size);
        let background = -0.65 + 0.1 * gaussian(&mut rng).clamp(-1.0, 1.0);
        for v in &mut img.data {
            *v = background;
        }

        let mut findings = Vec::new();
        let mut sentences = Vec::new();

        match &spec.mode {
            SynthMode::Product {
                attributes,
                locations,
                observed_pairs,
                positive_prior,
            } => {
                let pairs: Vec<(usize, usize)> = match observed_pairs {
                    Some(list) => list
                        .iter()
                        .map(|(a, l)| {
                            (
                                attributes.iter().position(|x| x == a).unwrap(),
                                locations.iter().position(|x| x == l).unwrap(),
                            )
                        })
                        .collect(),
                    None => (0..attributes.len())
                        .flat_map(|a| (0..locations.len()).map(move |l| (a, l)))
                        .collect(),
                };
                for (ai, li) in pairs {
                    if !rng.gen_bool(*positive_prior) {
                        continue;
                    }
                    let (cy0, cx0, ch, cw) = cell_rect(size, locations.len(), li);
                    let jitter_y = 0.1 * ch as f64 * (rng.gen::<f64>() - 0.5);
                    let jitter_x = 0.1 * cw as f64 * (rng.gen::<f64>() - 0.5);
                    let cy = cy0 as f64 + ch as f64 / 2.0 + jitter_y;
                    let cx = cx0 as f64 + cw as f64 / 2.0 + jitter_x;
                    let half = ch.min(cw) as f64 * rng.gen_range(0.22..0.32);
                    let intensity = rng.gen_range(0.55..0.9);
                    draw_glyph(&mut img, GLYPHS[ai], cy, cx, half, intensity);
                    findings.push(Finding {
                        attribute: attributes[ai].clone(),
                        location: locations[li].clone(),
                        polarity: 1,
                    });
                    sentences.push(ReportSentence {
                        text: product_sentence(
                            &attributes[ai],
                            &locations[li],
                            spec.paraphrase,
                            &mut rng,
                        ),
                        has_finding: true,
                    });
                }
            }
            SynthMode::Severity { group_id, levels } => {
                let level = rng.gen_range(0..levels.len());
                let frac = level as f64 / (levels.len() - 1) as f64;
                // Radius jitter is sized to overlap adjacent levels, so
                // grading is noisy rather than trivially separable.
                let radius = size as f64 * (0.06 + 0.30 * frac)
                    + gaussian(&mut rng) * 0.042 * size as f64;
                let cy = size as f64 / 2.0 + gaussian(&mut rng) * 0.03 * size as f64;
                let cx = size as f64 / 2.0 + gaussian(&mut rng) * 0.03 * size as f64;
                let intensity = rng.gen_range(0.55..0.9);
                draw_glyph(&mut img, "disk", cy, cx, radius.max(1.5), intensity);
                findings.push(Finding {
                    attribute: group_id.clone(),
                    location: levels[level].label.clone(),
                    polarity: 1,
                });
                sentences.push(ReportSentence {
                    text: severity_sentence(&levels[level].label, spec.paraphrase, &mut rng),
                    has_finding: true,
                });
            }
        }

        if findings.is_empty() {
            let n = rng.gen_range(1..=2);
            for _ in 0..n {
                sentences.push(ReportSentence {
                    text: HEALTHY_SENTENCES[rng.gen_range(0..HEALTHY_SENTENCES.len())].to_string(),
                    has_finding: false,
                });
            }
        }
        if spec.paraphrase && rng.gen_bool(0.5) {
            sentences.push(ReportSentence {
                text: FILLER_SENTENCES[rng.gen_range(0..FILLER_SENTENCES.len())].to_string(),
                has_finding: false,
            });
        }

        // Pixel noise last so glyph edges stay soft.
        if spec.noise > 0.0 {
            for v in &mut img.data {
                *v += spec.noise * gaussian(&mut rng);
            }
        }
        img.clamp_values();
        write_png(&img, &image_dir.join(format!("{image_id}.png")))?;

        for f in &findings {
            let class_key = format!("{} | {}", f.attribute, f.location);
            *class_counts
                .entry(class_key)
                .or_default()
                .entry(split.to_string())
                .or_default() += 1;
        }
        *images_per_split.get_mut(split).unwrap() += 1;

        let record = ImageRecord {
            image_id,
            findings,
            sentences,
        };
        split_lines
            .get_mut(split)
            .unwrap()
            .push(serde_json::to_string(&record)?);
    }

    let mut label_paths = BTreeMap::new();
    for (split, lines) in &split_lines {
        let path = out_dir.join(format!("labels_{split}.jsonl"));
        let mut body = lines.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        std::fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))?;
        label_paths.insert(split.clone(), path);
    }

    let template_path = out_dir.join("template.json");
    std::fs::write(
        &template_path,
        serde_json::to_string_pretty(&spec.template_json())?,
    )
    .map_err(|e| Error::io(template_path.display().to_string(), e))?;

    let summary = SynthSummary {
        template_path,
        label_paths,
        image_dir,
        class_counts,
        images_per_split,
    };
    let summary_path = out_dir.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .map_err(|e| Error::io(summary_path.display().to_string(), e))?;
    Ok(summary)
}
