//! Declarative report templates: parsing, prompt expansion, and rendering
//! prediction scores back into finished structured-report text.
//!
//! A template file is a JSON document:
//!
//! ```json
//! {
//!   "version": "1",
//!   "attributes": ["opacity", "effusion"],
//!   "locations": ["left lung", "right lung"],
//!   "groups": [
//!     {
//!       "id": "findings",
//!       "kind": "product_group",
//!       "exclusive": false,
//!       "pairs": [["opacity", "left lung"], ["effusion", "right lung"]],
//!       "negative_sentence": "No acute findings."
//!     },
//!     {
//!       "id": "severity",
//!       "kind": "literal_group",
//!       "exclusive": true,
//!       "prompts": [
//!         { "label": "normal", "sentence": "The heart is normal in size." },
//!         { "label": "mild", "sentence": "There is mild cardiomegaly." }
//!       ]
//!     }
//!   ]
//! }
//! ```
//!
//! Product groups expand to one prompt per (attribute, location) pair, joined
//! with "in the". When `pairs` is omitted the full attribute x location
//! product is used, in attribute-major order. Literal prompts may be plain
//! strings; the optional `label` is the key used to match label-file findings
//! (it defaults to the sentence itself).
//!
//! Class indices are assigned in document order and are contiguous 0..C-1.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    ProductGroup,
    LiteralGroup,
}

/// Key used to match a label-file finding to a class.
///
/// Product prompts match on (attribute, location). Literal prompts match on
/// (group id, prompt label).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FindingKey {
    pub attribute: String,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub class_index: usize,
    pub sentence: String,
    pub key: FindingKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateNode {
    pub node_id: String,
    pub kind: GroupKind,
    pub prompts: Vec<PromptEntry>,
    pub exclusive: bool,
    pub negative_sentence: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateTree {
    pub version: String,
    pub attributes: Vec<String>,
    pub locations: Vec<String>,
    pub nodes: Vec<TemplateNode>,
}

/// Ordered list of the C prompt sentences, one per classifier output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub prompts: Vec<String>,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

// ---------------------------------------------------------------------------
// On-disk schema
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TemplateFile {
    version: String,
    #[serde(default)]
    attributes: Vec<String>,
    #[serde(default)]
    locations: Vec<String>,
    groups: Vec<GroupFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GroupFile {
    id: String,
    kind: GroupKind,
    exclusive: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompts: Option<Vec<LiteralPrompt>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pairs: Option<Vec<(String, String)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    negative_sentence: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum LiteralPrompt {
    Plain(String),
    Labeled { label: String, sentence: String },
}

// ---------------------------------------------------------------------------
// Parsing and validation
// ---------------------------------------------------------------------------

const PRODUCT_JOINER: &str = " in the ";

/// Parse and validate a template config. Class indices are assigned in
/// document order.
pub fn parse_template(config_text: &str) -> Result<TemplateTree> {
    let file: TemplateFile = serde_json::from_str(config_text)
        .map_err(|e| Error::TemplateParse(format!("{e}")))?;
    build_tree(file)
}

pub fn parse_template_file(path: &std::path::Path) -> Result<TemplateTree> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_template(&text)
}

fn build_tree(file: TemplateFile) -> Result<TemplateTree> {
    if file.groups.is_empty() {
        return Err(Error::TemplateValidation(
            "template has no groups; at least one is required".into(),
        ));
    }
    let attr_set: HashSet<&str> = file.attributes.iter().map(|s| s.as_str()).collect();
    let loc_set: HashSet<&str> = file.locations.iter().map(|s| s.as_str()).collect();

    let mut nodes = Vec::with_capacity(file.groups.len());
    let mut node_ids = HashSet::new();
    let mut sentences = HashSet::new();
    let mut keys = HashSet::new();
    let mut next_class = 0usize;

    for group in file.groups {
        if !node_ids.insert(group.id.clone()) {
            return Err(Error::TemplateValidation(format!(
                "duplicate group id `{}`",
                group.id
            )));
        }
        let mut prompts = Vec::new();
        match group.kind {
            GroupKind::ProductGroup => {
                if group.prompts.is_some() {
                    return Err(Error::TemplateValidation(format!(
                        "group `{}`: product_group takes `pairs`, not `prompts`",
                        group.id
                    )));
                }
                let pairs: Vec<(String, String)> = match &group.pairs {
                    Some(pairs) => pairs.clone(),
                    // Full product, attribute-major.
                    None => file
                        .attributes
                        .iter()
                        .flat_map(|a| {
                            file.locations.iter().map(move |l| (a.clone(), l.clone()))
                        })
                        .collect(),
                };
                if pairs.is_empty() {
                    return Err(Error::TemplateValidation(format!(
                        "group `{}`: empty product (no attributes/locations or empty pairs)",
                        group.id
                    )));
                }
                for (attr, loc) in pairs {
                    if !attr_set.contains(attr.as_str()) {
                        return Err(Error::TemplateValidation(format!(
                            "group `{}`: pair references undeclared attribute `{attr}`",
                            group.id
                        )));
                    }
                    if !loc_set.contains(loc.as_str()) {
                        return Err(Error::TemplateValidation(format!(
                            "group `{}`: pair references undeclared location `{loc}`",
                            group.id
                        )));
                    }
                    let sentence = format!("{attr}{PRODUCT_JOINER}{loc}");
                    prompts.push(PromptEntry {
                        class_index: next_class,
                        sentence,
                        key: FindingKey {
                            attribute: attr,
                            location: loc,
                        },
                    });
                    next_class += 1;
                }
            }
            GroupKind::LiteralGroup => {
                if group.pairs.is_some() {
                    return Err(Error::TemplateValidation(format!(
                        "group `{}`: literal_group takes `prompts`, not `pairs`",
                        group.id
                    )));
                }
                let raw = group.prompts.unwrap_or_default();
                for p in raw {
                    let (label, sentence) = match p {
                        LiteralPrompt::Plain(s) => (s.clone(), s),
                        LiteralPrompt::Labeled { label, sentence } => (label, sentence),
                    };
                    prompts.push(PromptEntry {
                        class_index: next_class,
                        sentence,
                        key: FindingKey {
                            attribute: group.id.clone(),
                            location: label,
                        },
                    });
                    next_class += 1;
                }
            }
        }

        let min = if group.exclusive { 2 } else { 1 };
        if prompts.len() < min {
            return Err(Error::TemplateValidation(format!(
                "group `{}`: {} prompt(s), but {} groups need at least {}",
                group.id,
                prompts.len(),
                if group.exclusive { "exclusive" } else { "non-exclusive" },
                min
            )));
        }
        for p in &prompts {
            if p.sentence.trim().is_empty() {
                return Err(Error::TemplateValidation(format!(
                    "group `{}`: empty prompt sentence at class {}",
                    group.id, p.class_index
                )));
            }
            if !sentences.insert(p.sentence.clone()) {
                return Err(Error::TemplateValidation(format!(
                    "duplicate sentence `{}` (group `{}`)",
                    p.sentence, group.id
                )));
            }
            if !keys.insert(p.key.clone()) {
                return Err(Error::TemplateValidation(format!(
                    "duplicate finding key ({}, {}) in group `{}`",
                    p.key.attribute, p.key.location, group.id
                )));
            }
        }
        nodes.push(TemplateNode {
            node_id: group.id,
            kind: group.kind,
            prompts,
            exclusive: group.exclusive,
            negative_sentence: group.negative_sentence,
        });
    }

    Ok(TemplateTree {
        version: file.version,
        attributes: file.attributes,
        locations: file.locations,
        nodes,
    })
}

impl TemplateTree {
    /// Total number of classes C across all groups.
    pub fn num_classes(&self) -> usize {
        self.nodes.iter().map(|n| n.prompts.len()).sum()
    }

    /// Look up the class index for a finding key, if the template defines it.
    pub fn class_for_key(&self, attribute: &str, location: &str) -> Option<usize> {
        self.nodes.iter().find_map(|n| {
            n.prompts
                .iter()
                .find(|p| p.key.attribute == attribute && p.key.location == location)
                .map(|p| p.class_index)
        })
    }

    /// Per-class prompt entry, indexed by class.
    pub fn prompt_entries(&self) -> Vec<&PromptEntry> {
        let mut entries: Vec<&PromptEntry> =
            self.nodes.iter().flat_map(|n| n.prompts.iter()).collect();
        entries.sort_by_key(|p| p.class_index);
        entries
    }

    /// Serialize back to the template config format. Parsing the result
    /// yields a tree with identical expansion.
    pub fn to_config_json(&self) -> String {
        let groups: Vec<GroupFile> = self
            .nodes
            .iter()
            .map(|n| match n.kind {
                GroupKind::ProductGroup => GroupFile {
                    id: n.node_id.clone(),
                    kind: n.kind,
                    exclusive: n.exclusive,
                    prompts: None,
                    pairs: Some(
                        n.prompts
                            .iter()
                            .map(|p| (p.key.attribute.clone(), p.key.location.clone()))
                            .collect(),
                    ),
                    negative_sentence: n.negative_sentence.clone(),
                },
                GroupKind::LiteralGroup => GroupFile {
                    id: n.node_id.clone(),
                    kind: n.kind,
                    exclusive: n.exclusive,
                    prompts: Some(
                        n.prompts
                            .iter()
                            .map(|p| LiteralPrompt::Labeled {
                                label: p.key.location.clone(),
                                sentence: p.sentence.clone(),
                            })
                            .collect(),
                    ),
                    pairs: None,
                    negative_sentence: n.negative_sentence.clone(),
                },
            })
            .collect();
        let file = TemplateFile {
            version: self.version.clone(),
            attributes: self.attributes.clone(),
            locations: self.locations.clone(),
            groups,
        };
        serde_json::to_string_pretty(&file).expect("template serialization cannot fail")
    }
}

/// Expand the tree into the ordered prompt list. Output order matches
/// class_index order.
pub fn expand_prompts(tree: &TemplateTree) -> PromptSet {
    PromptSet {
        prompts: tree
            .prompt_entries()
            .iter()
            .map(|p| p.sentence.clone())
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// How similarity scores become report lines.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecisionConfig {
    /// Non-exclusive sentences are included when similarity exceeds this.
    pub threshold: f64,
    /// Scale applied inside the per-group softmax.
    pub gamma: f64,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        DecisionConfig {
            threshold: 0.0,
            gamma: 50.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportLine {
    pub node_id: String,
    pub text: String,
    /// Class that selected this line; None for negative sentences.
    pub class_index: Option<usize>,
    /// Raw similarity of the selecting class.
    pub score: Option<f64>,
    /// Softmax probability (exclusive) or logistic probability (non-exclusive).
    pub probability: Option<f64>,
    /// True when an exclusive group tied and the lowest index was taken.
    pub tie_break: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructuredReport {
    pub lines: Vec<ReportLine>,
}

impl StructuredReport {
    /// Plain-text report, one sentence per line.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(&line.text);
            out.push('\n');
        }
        out
    }
}

/// Numerically stable softmax over `values` scaled by `gamma`.
fn softmax_scaled(values: &[f64], gamma: f64) -> Vec<f64> {
    let max = values
        .iter()
        .map(|v| v * gamma)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v * gamma - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Render a similarity vector into a structured report.
///
/// Exclusive groups emit the argmax-probability sentence after a softmax
/// within the group (ties break to the lowest class index, recorded in the
/// line). Non-exclusive groups emit every sentence whose similarity exceeds
/// the threshold; when none does and a negative sentence is defined, that is
/// emitted instead.
pub fn render_report(
    tree: &TemplateTree,
    scores: &[f64],
    config: &DecisionConfig,
) -> Result<StructuredReport> {
    let c = tree.num_classes();
    if scores.len() != c {
        return Err(Error::DimensionMismatch(format!(
            "template has {c} classes but {} scores were given",
            scores.len()
        )));
    }
    let mut lines = Vec::new();
    for node in &tree.nodes {
        let group_scores: Vec<f64> = node.prompts.iter().map(|p| scores[p.class_index]).collect();
        if node.exclusive {
            let probs = softmax_scaled(&group_scores, config.gamma);
            let mut best = 0usize;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[best] {
                    best = i;
                }
            }
            let tie = probs
                .iter()
                .enumerate()
                .any(|(i, p)| i != best && *p == probs[best]);
            let chosen = &node.prompts[best];
            lines.push(ReportLine {
                node_id: node.node_id.clone(),
                text: chosen.sentence.clone(),
                class_index: Some(chosen.class_index),
                score: Some(group_scores[best]),
                probability: Some(probs[best]),
                tie_break: tie,
            });
        } else {
            let mut any = false;
            for (i, prompt) in node.prompts.iter().enumerate() {
                if group_scores[i] > config.threshold {
                    any = true;
                    lines.push(ReportLine {
                        node_id: node.node_id.clone(),
                        text: prompt.sentence.clone(),
                        class_index: Some(prompt.class_index),
                        score: Some(group_scores[i]),
                        probability: Some(logistic(config.gamma * group_scores[i])),
                        tie_break: false,
                    });
                }
            }
            if !any {
                if let Some(neg) = &node.negative_sentence {
                    lines.push(ReportLine {
                        node_id: node.node_id.clone(),
                        text: neg.clone(),
                        class_index: None,
                        score: None,
                        probability: None,
                        tie_break: false,
                    });
                }
            }
        }
    }
    Ok(StructuredReport { lines })
}
