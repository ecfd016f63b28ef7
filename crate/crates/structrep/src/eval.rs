//! ROC-AUC and the aggregation schemes used by the evaluation protocol:
//! location-averaged AUC per pathology and macro one-vs-rest AUC for
//! exclusive severity groups, plus results-table emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabelVector;
use crate::error::{Error, Result};
use crate::template::{GroupKind, TemplateTree};

/// Per-image class scores paired with the ground-truth label vector.
#[derive(Debug, Clone)]
pub struct ScoredPrediction {
    pub image_id: String,
    pub scores: Vec<f64>,
    pub labels: LabelVector,
}

/// Map from pathology name to its location-specific class indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathologyGrouping {
    pub groups: BTreeMap<String, Vec<usize>>,
}

impl PathologyGrouping {
    /// Derive the grouping from a template: one pathology per product-group
    /// attribute, holding that attribute's classes across locations.
    pub fn from_template(tree: &TemplateTree) -> Self {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for node in &tree.nodes {
            if node.kind == GroupKind::ProductGroup {
                for p in &node.prompts {
                    groups
                        .entry(p.key.attribute.clone())
                        .or_default()
                        .push(p.class_index);
                }
            }
        }
        PathologyGrouping { groups }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut seen = vec![false; num_classes];
        for (name, classes) in &self.groups {
            for &c in classes {
                if c >= num_classes {
                    return Err(Error::Evaluation(format!(
                        "grouping `{name}` references class {c}, but only {num_classes} exist"
                    )));
                }
                if seen[c] {
                    return Err(Error::Evaluation(format!(
                        "class {c} appears in more than one pathology group"
                    )));
                }
                seen[c] = true;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// ROC-AUC
// ---------------------------------------------------------------------------

/// ROC-AUC as the Mann-Whitney statistic: the fraction of (positive,
/// negative) pairs ranked correctly, ties counted one half. Computed with the
/// O(n log n) rank-sum method.
///
/// Returns an undefined-metric error when either class is absent; callers
/// exclude those strata from averages instead of imputing a value.
pub fn roc_auc(scores: &[f64], labels: &[i8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&y| y > 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes; got {pos} positive / {neg} negative"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Evaluation("non-finite score in AUC input".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Average ranks over tie groups, then sum positive ranks.
    let n = order.len();
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] > 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }

    let p = pos as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * neg as f64))
}

/// Per-class AUC over a prediction set, `None` where the metric is undefined
/// (single class present) or every label is masked.
pub fn per_class_auc(preds: &[ScoredPrediction], num_classes: usize) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for p in preds {
                if p.labels.valid[c] {
                    scores.push(p.scores[c]);
                    labels.push(p.labels.y[c]);
                }
            }
            match roc_auc(&scores, &labels) {
                Ok(a) => Some(a),
                Err(Error::UndefinedMetric(msg)) => {
                    log::warn!("class {c}: {msg}; excluded from averages");
                    None
                }
                Err(e) => {
                    log::warn!("class {c}: {e}; excluded from averages");
                    None
                }
            }
        })
        .collect()
}

/// Location-averaged AUC per pathology plus the macro average.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocationAveragedAuc {
    pub per_pathology: BTreeMap<String, f64>,
    pub macro_avg: f64,
}

/// Average per-class AUCs within each pathology's location classes
/// (unweighted), then macro-average over pathologies. Undefined classes are
/// skipped; pathologies with every class undefined are excluded with a
/// warning.
pub fn location_averaged_auc(
    preds: &[ScoredPrediction],
    grouping: &PathologyGrouping,
    num_classes: usize,
) -> Result<LocationAveragedAuc> {
    grouping.validate(num_classes)?;
    let class_auc = per_class_auc(preds, num_classes);
    let mut per_pathology = BTreeMap::new();
    for (name, classes) in &grouping.groups {
        let defined: Vec<f64> = classes.iter().filter_map(|&c| class_auc[c]).collect();
        if defined.is_empty() {
            log::warn!("pathology `{name}`: all location classes undefined; excluded");
            continue;
        }
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        per_pathology.insert(name.clone(), mean);
    }
    if per_pathology.is_empty() {
        return Err(Error::UndefinedMetric(
            "no pathology had a defined AUC".into(),
        ));
    }
    let macro_avg = per_pathology.values().sum::<f64>() / per_pathology.len() as f64;
    Ok(LocationAveragedAuc {
        per_pathology,
        macro_avg,
    })
}

/// Macro one-vs-rest AUC over an exclusive group, scoring each level by its
/// probability. `probs[i][k]` is image i's probability for level k;
/// `levels[i]` is the true level. Levels absent from the labels are excluded
/// with a warning.
pub fn severity_auc(probs: &[Vec<f64>], levels: &[usize], num_levels: usize) -> Result<f64> {
    if probs.len() != levels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} probability rows vs {} levels",
            probs.len(),
            levels.len()
        )));
    }
    let distinct: std::collections::BTreeSet<usize> = levels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "severity AUC needs >= 2 levels present; got {}",
            distinct.len()
        )));
    }
    let mut aucs = Vec::new();
    for level in 0..num_levels {
        let scores: Vec<f64> = probs.iter().map(|row| row[level]).collect();
        let labels: Vec<i8> = levels
            .iter()
            .map(|&l| if l == level { 1 } else { -1 })
            .collect();
        match roc_auc(&scores, &labels) {
            Ok(a) => aucs.push(a),
            Err(Error::UndefinedMetric(_)) => {
                log::warn!("severity level {level} absent from evaluation set; excluded");
            }
            Err(e) => return Err(e),
        }
    }
    if aucs.is_empty() {
        return Err(Error::UndefinedMetric(
            "no severity level had a defined AUC".into(),
        ));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

// ---------------------------------------------------------------------------
// Results tables and prediction dumps
// ---------------------------------------------------------------------------

/// One labeled row of a comparison table (e.g. "prompt-init 1-shot").
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledRun {
    pub label: String,
    pub metrics: BTreeMap<String, f64>,
}

/// Write runs as a CSV plus an aligned text table. Byte-stable for identical
/// inputs. All runs must share the same column set.
pub fn emit_results_table(runs: &[LabeledRun], path: &Path) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::Evaluation("no runs to tabulate".into()));
    }
    let columns: Vec<String> = runs[0].metrics.keys().cloned().collect();
    for run in runs {
        let cols: Vec<String> = run.metrics.keys().cloned().collect();
        if cols != columns {
            return Err(Error::Evaluation(format!(
                "run `{}` has columns {:?}, expected {:?}",
                run.label, cols, columns
            )));
        }
    }

    let mut csv = String::from("method");
    for c in &columns {
        let _ = write!(csv, ",{c}");
    }
    csv.push('\n');
    for run in runs {
        csv.push_str(&run.label);
        for c in &columns {
            let _ = write!(csv, ",{:.6}", run.metrics[c]);
        }
        csv.push('\n');
    }
    let csv_path = path.with_extension("csv");
    std::fs::write(&csv_path, &csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;

    // Aligned text rendering.
    let label_width = runs
        .iter()
        .map(|r| r.label.len())
        .chain(["method".len()])
        .max()
        .unwrap();
    let col_width = columns
        .iter()
        .map(|c| c.len().max(8))
        .collect::<Vec<usize>>();
    let mut txt = format!("{:<label_width$}", "method");
    for (c, w) in columns.iter().zip(&col_width) {
        let _ = write!(txt, "  {c:>w$}");
    }
    txt.push('\n');
    for run in runs {
        let _ = write!(txt, "{:<label_width$}", run.label);
        for (c, w) in columns.iter().zip(&col_width) {
            let _ = write!(txt, "  {:>w$.4}", run.metrics[c]);
        }
        txt.push('\n');
    }
    let txt_path = path.with_extension("txt");
    std::fs::write(&txt_path, &txt).map_err(|e| Error::io(txt_path.display().to_string(), e))?;
    Ok(())
}

/// Raw prediction dump: one CSV row per (image, class) so third parties can
/// recompute every metric.
pub fn dump_predictions(preds: &[ScoredPrediction], path: &Path) -> Result<()> {
    let mut out = String::from("image_id,class_index,score,label,mask\n");
    for p in preds {
        for c in 0..p.scores.len() {
            let _ = writeln!(
                out,
                "{},{},{:.9},{},{}",
                p.image_id,
                c,
                p.scores[c],
                p.labels.y[c],
                if p.labels.valid[c] { 1 } else { 0 }
            );
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}


#[cfg(test)]
mod tests {
    use super::test_oracles::pair_counting_auc;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(label_spec: &[i8]) -> Vec<i8> {
        label_spec.to_vec()
    }

    #[test]
    fn perfect_separation_is_one() {
        let auc = roc_auc(&[0.9, 0.8, 0.3, 0.2], &labels(&[1, 1, -1, -1])).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn hand_case_with_tie_is_0_875() {
        // Pairs: (0.8,0.5)=1, (0.8,0.1)=1, (0.5,0.5)=0.5, (0.5,0.1)=1 -> 3.5/4.
        let auc = roc_auc(&[0.8, 0.5, 0.5, 0.1], &labels(&[1, 1, -1, -1])).unwrap();
        assert_eq!(auc, 0.875);
    }

    #[test]
    fn label_flip_is_antisymmetric() {
        let scores = [0.8, 0.5, 0.5, 0.1, 0.3];
        let y = labels(&[1, 1, -1, -1, 1]);
        let flipped: Vec<i8> = y.iter().map(|v| -v).collect();
        let a = roc_auc(&scores, &y).unwrap();
        let b = roc_auc(&scores, &flipped).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_undefined() {
        let err = roc_auc(&[0.1, 0.2], &labels(&[1, 1])).unwrap_err();
        assert!(matches!(err, Error::UndefinedMetric(_)));
    }

    #[test]
    fn sorted_method_matches_pair_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..200 {
            let n = rng.gen_range(2..=50);
            // Draw from a small grid so ties are frequent.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
            let y: Vec<i8> = (0..n).map(|_| if rng.gen_bool(0.5) { 1 } else { -1 }).collect();
            let oracle = pair_counting_auc(&scores, &y);
            let fast = roc_auc(&scores, &y);
            match oracle {
                Some(expected) => {
                    let got = fast.unwrap();
                    assert!(
                        (got - expected).abs() < 1e-12,
                        "case {case}: fast {got} vs oracle {expected}"
                    );
                }
                None => assert!(fast.is_err(), "case {case}: expected undefined"),
            }
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(4..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut y: Vec<i8> = (0..n).map(|_| if rng.gen_bool(0.5) { 1 } else { -1 }).collect();
            y[0] = 1;
            y[1] = -1;
            let base = roc_auc(&scores, &y).unwrap();
            let scale: f64 = rng.gen_range(0.1..3.0);
            let shift: f64 = rng.gen_range(-2.0..2.0);
            for (name, transformed) in [
                ("affine", scores.iter().map(|s| scale * s + shift).collect::<Vec<_>>()),
                ("exp", scores.iter().map(|s| s.exp()).collect::<Vec<_>>()),
                ("cube+", scores.iter().map(|s| s.powi(3) + s).collect::<Vec<_>>()),
            ] {
                let t = roc_auc(&transformed, &y).unwrap();
                assert!((t - base).abs() < 1e-12, "{name}: {t} vs {base}");
            }
        }
    }

    #[test]
    fn random_scores_concentrate_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 2000usize;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<i8> = (0..n).map(|_| if rng.gen_bool(0.5) { 1 } else { -1 }).collect();
        let auc = roc_auc(&scores, &y).unwrap();
        // Loose 3-sigma style bound for a U-statistic at this n.
        assert!((auc - 0.5).abs() < 0.05, "auc {auc}");
    }

    fn pred(id: &str, scores: Vec<f64>, y: Vec<i8>) -> ScoredPrediction {
        let valid = vec![true; y.len()];
        ScoredPrediction {
            image_id: id.into(),
            scores,
            labels: LabelVector { y, valid },
        }
    }

    #[test]
    fn singleton_group_equals_plain_auc() {
        let preds = vec![
            pred("a", vec![0.9], vec![1]),
            pred("b", vec![0.2], vec![-1]),
            pred("c", vec![0.4], vec![-1]),
            pred("d", vec![0.8], vec![1]),
        ];
        let grouping = PathologyGrouping {
            groups: [("p".to_string(), vec![0])].into_iter().collect(),
        };
        let out = location_averaged_auc(&preds, &grouping, 1).unwrap();
        let direct = roc_auc(&[0.9, 0.2, 0.4, 0.8], &[1, -1, -1, 1]).unwrap();
        assert_eq!(out.per_pathology["p"], direct);
        assert_eq!(out.macro_avg, direct);
    }

    #[test]
    fn pathology_auc_is_mean_of_location_aucs() {
        // Class 0 separates perfectly (AUC 1.0); class 1 ranks backwards for
        // one pair (engineered AUC 0.5).
        let preds = vec![
            pred("a", vec![0.9, 0.1], vec![1, 1]),
            pred("b", vec![0.1, 0.9], vec![-1, -1]),
            pred("c", vec![0.8, 0.9], vec![1, 1]),
            pred("d", vec![0.2, 0.1], vec![-1, -1]),
        ];
        let grouping = PathologyGrouping {
            groups: [("p".to_string(), vec![0, 1])].into_iter().collect(),
        };
        let out = location_averaged_auc(&preds, &grouping, 2).unwrap();
        assert!((out.per_pathology["p"] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn masked_labels_are_excluded_from_auc() {
        let mut preds = vec![
            pred("a", vec![0.9], vec![1]),
            pred("b", vec![0.1], vec![-1]),
            // This record would break perfect separation if counted.
            pred("c", vec![0.95], vec![-1]),
        ];
        preds[2].labels.valid[0] = false;
        let aucs = per_class_auc(&preds, 1);
        assert_eq!(aucs[0], Some(1.0));
    }

    #[test]
    fn severity_uniform_probabilities_give_half() {
        let probs = vec![vec![1.0 / 6.0; 6]; 12];
        let levels: Vec<usize> = (0..12).map(|i| i % 6).collect();
        let auc = severity_auc(&probs, &levels, 6).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn severity_perfect_ranking_gives_one() {
        let mut probs = Vec::new();
        let mut levels = Vec::new();
        for i in 0..12 {
            let level = i % 3;
            let mut row = vec![0.1; 3];
            row[level] = 0.8;
            probs.push(row);
            levels.push(level);
        }
        let auc = severity_auc(&probs, &levels, 3).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn severity_matches_exhaustive_pair_counting() {
        let probs = vec![
            vec![0.7, 0.2, 0.1],
            vec![0.3, 0.5, 0.2],
            vec![0.2, 0.3, 0.5],
            vec![0.4, 0.4, 0.2],
            vec![0.1, 0.6, 0.3],
            vec![0.25, 0.25, 0.5],
        ];
        let levels = vec![0, 1, 2, 0, 1, 2];
        let got = severity_auc(&probs, &levels, 3).unwrap();
        let mut expected = 0.0;
        for level in 0..3 {
            let scores: Vec<f64> = probs.iter().map(|r| r[level]).collect();
            let y: Vec<i8> = levels.iter().map(|&l| if l == level { 1 } else { -1 }).collect();
            expected += pair_counting_auc(&scores, &y).unwrap();
        }
        expected /= 3.0;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn severity_single_level_is_undefined() {
        let probs = vec![vec![0.5, 0.5]; 4];
        let levels = vec![1, 1, 1, 1];
        assert!(matches!(
            severity_auc(&probs, &levels, 2),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn results_table_is_byte_stable_and_checks_columns() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("table");
        let runs = vec![
            LabeledRun {
                label: "prompt 1-shot".into(),
                metrics: [("avg_auc".to_string(), 0.81), ("opacity".to_string(), 0.9)]
                    .into_iter()
                    .collect(),
            },
            LabeledRun {
                label: "random 1-shot".into(),
                metrics: [("avg_auc".to_string(), 0.71), ("opacity".to_string(), 0.7)]
                    .into_iter()
                    .collect(),
            },
        ];
        emit_results_table(&runs, &base).unwrap();
        let first = std::fs::read(base.with_extension("csv")).unwrap();
        let lines = String::from_utf8(first.clone()).unwrap();
        assert_eq!(lines.lines().count(), 3);
        emit_results_table(&runs, &base).unwrap();
        let second = std::fs::read(base.with_extension("csv")).unwrap();
        assert_eq!(first, second);

        assert!(matches!(
            emit_results_table(&[], &base),
            Err(Error::Evaluation(_))
        ));
        let bad = vec![
            runs[0].clone(),
            LabeledRun {
                label: "other".into(),
                metrics: [("different".to_string(), 0.5)].into_iter().collect(),
            },
        ];
        assert!(matches!(
            emit_results_table(&bad, &base),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn macro_average_is_permutation_invariant() {
        let preds = vec![
            pred("a", vec![0.9, 0.2, 0.7], vec![1, -1, 1]),
            pred("b", vec![0.1, 0.8, 0.3], vec![-1, 1, -1]),
            pred("c", vec![0.7, 0.4, 0.9], vec![1, -1, 1]),
            pred("d", vec![0.3, 0.6, 0.2], vec![-1, 1, -1]),
        ];
        let g1 = PathologyGrouping {
            groups: [
                ("a".to_string(), vec![0]),
                ("b".to_string(), vec![1, 2]),
            ]
            .into_iter()
            .collect(),
        };
        // Same grouping, classes listed in reverse order.
        let g2 = PathologyGrouping {
            groups: [
                ("b".to_string(), vec![2, 1]),
                ("a".to_string(), vec![0]),
            ]
            .into_iter()
            .collect(),
        };
        let m1 = location_averaged_auc(&preds, &g1, 3).unwrap().macro_avg;
        let m2 = location_averaged_auc(&preds, &g2, 3).unwrap().macro_avg;
        assert!((m1 - m2).abs() < 1e-12);
    }
}
