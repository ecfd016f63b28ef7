//! Command implementations behind the CLI: synthetic-data generation,
//! pretraining, the few-shot fine-tuning sweep, evaluation, report
//! rendering, and plotting. Each command writes a run manifest before work
//! starts and finalizes it on exit, success or failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classifier::{
    classify, finetune, init_classifier, init_classifier_random, load_classifier, macro_metric,
    predict_probabilities, save_classifier, score_dataset, FinetuneConfig, PromptClassifier,
};
use crate::config::{ExperimentConfig, InitMode, RunManifest};
use crate::data::{
    derive_seed, load_dataset, sample_episode, synth_generate, DatasetIndex,
    EpisodeSpec, UnknownFinding,
};
use crate::encoders::{
    load_bundle, load_container, save_bundle, ContainerKind, EncoderBundle,
};
use crate::error::{Error, Result};
use crate::eval::{
    dump_predictions, emit_results_table, location_averaged_auc, LabeledRun, PathologyGrouping,
};
use crate::pretrain::{pretrain, PretrainConfig, PretrainReport};
use crate::template::{
    expand_prompts, parse_template_file, render_report, DecisionConfig, GroupKind, TemplateTree,
};

fn load_split(config: &ExperimentConfig, tree: &TemplateTree, split: &str) -> Result<DatasetIndex> {
    let (index, _warnings) = load_dataset(
        &config.label_path(split),
        &config.image_dir(),
        tree,
        config.encoder.input_size,
        UnknownFinding::Warn,
    )?;
    Ok(index)
}

fn finalize<T>(
    manifest: &mut RunManifest,
    manifest_path: &Path,
    started: Instant,
    outcome: Result<T>,
) -> Result<T> {
    manifest.wall_clock_seconds = Some(started.elapsed().as_secs_f64());
    match &outcome {
        Ok(_) => manifest.status = "ok".into(),
        Err(e) => {
            manifest.status = "failed".into();
            manifest.error = Some(e.to_string());
        }
    }
    manifest.write(manifest_path)?;
    outcome
}

// ---------------------------------------------------------------------------
// synth-data
// ---------------------------------------------------------------------------

pub fn cmd_synth_data(config: &ExperimentConfig, raw: serde_json::Value, force: bool) -> Result<()> {
    let spec = config
        .data
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("config has no data.synth section".into()))?;
    let out_dir = &config.data.root;
    if out_dir.exists()
        && std::fs::read_dir(out_dir)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false)
    {
        if !force {
            return Err(Error::Config(format!(
                "output dir {} is not empty; pass --force to regenerate",
                out_dir.display()
            )));
        }
        std::fs::remove_dir_all(out_dir)
            .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let started = Instant::now();
    let manifest_path = out_dir.join("manifest.json");
    let mut manifest = RunManifest::new("synth-data", raw, Some(spec.seed));
    manifest.write(&manifest_path)?;

    let outcome = synth_generate(spec, out_dir);
    let summary = finalize(&mut manifest, &manifest_path, started, outcome)?;

    // Per-class split counts, in the shape of a prompt-distribution table.
    println!("dataset written to {}", out_dir.display());
    println!();
    let width = summary
        .class_counts
        .keys()
        .map(|k| k.len())
        .chain(["class".len(), "total images".len()])
        .max()
        .unwrap_or(12);
    println!("{:<width$}  {:>7}  {:>7}  {:>7}", "class", "train", "val", "test");
    for (class, counts) in &summary.class_counts {
        println!(
            "{:<width$}  {:>7}  {:>7}  {:>7}",
            class,
            counts.get("train").copied().unwrap_or(0),
            counts.get("val").copied().unwrap_or(0),
            counts.get("test").copied().unwrap_or(0),
        );
    }
    println!(
        "{:<width$}  {:>7}  {:>7}  {:>7}",
        "total images",
        summary.images_per_split.get("train").copied().unwrap_or(0),
        summary.images_per_split.get("val").copied().unwrap_or(0),
        summary.images_per_split.get("test").copied().unwrap_or(0),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

fn metrics_csv_append(path: &Path, report: &PretrainReport) -> Result<()> {
    let mut body = if path.exists() {
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?
    } else {
        String::from("epoch,split,loss,retrieval_top1\n")
    };
    for e in &report.epochs {
        body.push_str(&format!("{},train,{:.6},\n", e.epoch, e.train_loss));
        if let (Some(loss), Some(r)) = (e.val_loss, e.val_retrieval_top1) {
            body.push_str(&format!("{},val,{loss:.6},{r:.6}\n", e.epoch));
        }
    }
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

fn last_logged_epoch(path: &Path) -> Result<Option<usize>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').next())
        .filter_map(|e| e.parse::<usize>().ok())
        .max())
}

pub struct PretrainOutputs {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub report: PretrainReport,
}

pub fn cmd_pretrain(
    config: &ExperimentConfig,
    raw: serde_json::Value,
    resume: bool,
) -> Result<PretrainOutputs> {
    let out_dir = config.output_root.join("pretrain");
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let manifest_path = out_dir.join("manifest.json");
    let checkpoint_path = out_dir.join("checkpoint.ckpt");
    let metrics_path = out_dir.join("metrics.csv");

    let started = Instant::now();
    let mut manifest = RunManifest::new("pretrain", raw, Some(config.pretrain.seed));
    manifest.checkpoints = vec![checkpoint_path.clone()];
    manifest.metrics_files = vec![metrics_path.clone()];
    manifest.write(&manifest_path)?;

    let outcome = (|| {
        let tree = parse_template_file(&config.template_path())?;
        let prompts = expand_prompts(&tree);
        let train = load_split(config, &tree, "train")?;
        let val = load_split(config, &tree, "val")?;

        let (mut bundle, epoch_offset) = if resume {
            if !checkpoint_path.exists() {
                return Err(Error::Config(format!(
                    "--resume given but {} does not exist",
                    checkpoint_path.display()
                )));
            }
            let bundle = load_bundle(&checkpoint_path)?;
            let offset = last_logged_epoch(&metrics_path)?.map(|e| e + 1).unwrap_or(0);
            (bundle, offset)
        } else {
            // Vocabulary covers dataset sentences plus the template prompts.
            let mut corpus: Vec<&str> = train.all_sentences();
            corpus.extend(prompts.prompts.iter().map(|s| s.as_str()));
            (
                EncoderBundle::new(config.encoder.clone(), corpus, config.pretrain.seed),
                0,
            )
        };

        let pconfig = PretrainConfig {
            epochs: config.pretrain.epochs,
            batch_size: config.pretrain.batch_size,
            lr: config.pretrain.lr,
            warmup_epochs: config.pretrain.warmup_epochs,
            weight_decay: config.pretrain.weight_decay,
            seed: config.pretrain.seed,
            eval_batch: config.pretrain.eval_batch,
            augment: config.pretrain.augment.unwrap_or_default(),
            epoch_offset,
        };
        let result = pretrain(&mut bundle, &train, &val, &pconfig);
        // Divergence still leaves the best parameters in the bundle; persist
        // whatever we have before propagating.
        save_bundle(&bundle, &checkpoint_path)?;
        let report = result?;
        metrics_csv_append(&metrics_path, &report)?;
        for e in &report.epochs {
            log::info!(
                "epoch {}: train_loss {:.4} val_loss {:?} val_retrieval {:?}",
                e.epoch,
                e.train_loss,
                e.val_loss,
                e.val_retrieval_top1
            );
        }
        Ok(PretrainOutputs {
            checkpoint: checkpoint_path.clone(),
            metrics: metrics_path.clone(),
            report,
        })
    })();
    finalize(&mut manifest, &manifest_path, started, outcome)
}

// ---------------------------------------------------------------------------
// finetune sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub shots: usize,
    pub init: InitMode,
    pub seed: u64,
    pub macro_auc: f64,
    pub checkpoint: PathBuf,
}

pub struct FinetuneOutputs {
    pub cells: Vec<SweepCell>,
    pub cells_csv: PathBuf,
    pub aggregate_csv: PathBuf,
    pub results_base: PathBuf,
}

/// One fine-tuning cell: episode -> finetune -> test macro AUC.
#[allow(clippy::too_many_arguments)]
fn run_cell(
    config: &ExperimentConfig,
    tree: &TemplateTree,
    bundle: &EncoderBundle,
    train: &DatasetIndex,
    val: &DatasetIndex,
    test: &DatasetIndex,
    shots: usize,
    init: InitMode,
    seed: u64,
    out_dir: &Path,
) -> Result<SweepCell> {
    let prompts = expand_prompts(tree);
    let mut cell_bundle = bundle.clone();
    let mut classifier = match init {
        InitMode::Prompt => init_classifier(&prompts, &cell_bundle)?,
        InitMode::Random => init_classifier_random(
            &prompts,
            cell_bundle.config.embed_dim,
            derive_seed(seed, "random-init", shots as u64),
        )?,
    };
    let spec = EpisodeSpec {
        mode: crate::data::SamplingMode::KShot,
        k: shots,
        classes: (0..tree.num_classes()).collect(),
        seed: derive_seed(seed, "episode", shots as u64),
        epoch_images_per_class: config.finetune.epoch_images_per_class,
    };
    let episode = sample_episode(train, &spec)?;
    let fconfig = FinetuneConfig {
        gamma: config.finetune.gamma,
        epochs: config.finetune.epochs,
        lr: config.finetune.lr,
        batch_size: config.finetune.batch_size,
        epoch_images_per_class: config.finetune.epoch_images_per_class,
        warmup_epochs: config.finetune.warmup_epochs,
        seed,
        unfreeze_trunk: config.finetune.unfreeze_trunk,
    };
    finetune(
        &mut classifier,
        &mut cell_bundle,
        tree,
        train,
        &episode,
        Some(val),
        &fconfig,
    )?;
    let preds = score_dataset(&cell_bundle, &classifier, test)?;
    let macro_auc = macro_metric(tree, &preds, config.finetune.gamma)?;
    let checkpoint = out_dir.join(format!("cells/shots{shots}_{init}_seed{seed}.ckpt"));
    save_classifier(&cell_bundle, &classifier, &checkpoint)?;
    Ok(SweepCell {
        shots,
        init,
        seed,
        macro_auc,
        checkpoint,
    })
}

pub fn cmd_finetune(
    config: &ExperimentConfig,
    raw: serde_json::Value,
    pretrained: Option<PathBuf>,
) -> Result<FinetuneOutputs> {
    let out_dir = config.output_root.join("finetune");
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let manifest_path = out_dir.join("manifest.json");
    let started = Instant::now();
    let mut manifest = RunManifest::new("finetune", raw, None);
    manifest.write(&manifest_path)?;

    let ckpt = pretrained
        .unwrap_or_else(|| config.output_root.join("pretrain").join("checkpoint.ckpt"));

    let outcome = (|manifest: &mut RunManifest| {
        let tree = parse_template_file(&config.template_path())?;
        let bundle = load_bundle(&ckpt)?;
        let train = load_split(config, &tree, "train")?;
        let val = load_split(config, &tree, "val")?;
        let test = load_split(config, &tree, "test")?;

        let mut cells = Vec::new();
        for &shots in &config.finetune.shots {
            for &init in &config.finetune.init_modes {
                for &seed in &config.finetune.seeds {
                    let label = format!("shots{shots}_{init}_seed{seed}");
                    match run_cell(
                        config, &tree, &bundle, &train, &val, &test, shots, init, seed, &out_dir,
                    ) {
                        Ok(cell) => {
                            log::info!("{label}: macro AUC {:.4}", cell.macro_auc);
                            manifest.checkpoints.push(cell.checkpoint.clone());
                            cells.push(cell);
                        }
                        Err(e) => {
                            log::warn!("{label} failed: {e}");
                            manifest.failed_cells.push(format!("{label}: {e}"));
                        }
                    }
                }
            }
        }
        if cells.is_empty() {
            return Err(Error::Evaluation("every sweep cell failed".into()));
        }

        // Per-cell CSV.
        let cells_csv = out_dir.join("cells.csv");
        let mut body = String::from("shots,init,seed,macro_auc\n");
        for c in &cells {
            body.push_str(&format!(
                "{},{},{},{:.6}\n",
                c.shots, c.init, c.seed, c.macro_auc
            ));
        }
        std::fs::write(&cells_csv, body).map_err(|e| Error::io(cells_csv.display().to_string(), e))?;

        // Aggregate over seeds per (shots, init).
        let mut agg: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
        for c in &cells {
            agg.entry((c.shots, c.init.to_string()))
                .or_default()
                .push(c.macro_auc);
        }
        let aggregate_csv = out_dir.join("aggregate.csv");
        let mut body = String::from("shots,init,macro_auc,seeds\n");
        let mut runs = Vec::new();
        for ((shots, init), values) in &agg {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            body.push_str(&format!("{shots},{init},{mean:.6},{}\n", values.len()));
            runs.push(LabeledRun {
                label: format!("{init}-init {shots}-shot"),
                metrics: [("avg_auc".to_string(), mean)].into_iter().collect(),
            });
        }
        std::fs::write(&aggregate_csv, body)
            .map_err(|e| Error::io(aggregate_csv.display().to_string(), e))?;
        let results_base = out_dir.join("results");
        emit_results_table(&runs, &results_base)?;
        manifest.metrics_files = vec![
            cells_csv.clone(),
            aggregate_csv.clone(),
            results_base.with_extension("csv"),
        ];
        Ok(FinetuneOutputs {
            cells,
            cells_csv,
            aggregate_csv,
            results_base,
        })
    })(&mut manifest);
    finalize(&mut manifest, &manifest_path, started, outcome)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Load inference state from either checkpoint kind. A pretrain-only bundle
/// becomes a zero-shot classifier built from the template prompts.
pub fn load_inference(
    checkpoint: &Path,
    tree: &TemplateTree,
) -> Result<(EncoderBundle, PromptClassifier)> {
    let kind = load_container(checkpoint)?.kind;
    let prompts = expand_prompts(tree);
    match kind {
        ContainerKind::EncoderBundle => {
            let bundle = load_bundle(checkpoint)?;
            let classifier = init_classifier(&prompts, &bundle)?;
            Ok((bundle, classifier))
        }
        ContainerKind::Classifier => {
            let (bundle, classifier) = load_classifier(checkpoint)?;
            if classifier.prompt_set.prompts != prompts.prompts {
                return Err(Error::Config(
                    "template prompts do not match the checkpoint's prompt list".into(),
                ));
            }
            Ok((bundle, classifier))
        }
    }
}

pub struct EvalOutputs {
    pub metrics_json: PathBuf,
    pub predictions_csv: PathBuf,
    pub macro_auc: f64,
}

pub fn cmd_eval(
    config: &ExperimentConfig,
    raw: serde_json::Value,
    checkpoint: PathBuf,
    split: &str,
) -> Result<EvalOutputs> {
    let out_dir = config.output_root.join("eval");
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let manifest_path = out_dir.join("manifest.json");
    let started = Instant::now();
    let mut manifest = RunManifest::new("eval", raw, None);
    manifest.checkpoints = vec![checkpoint.clone()];
    manifest.write(&manifest_path)?;

    let outcome = (|| {
        let tree = parse_template_file(&config.template_path())?;
        let (bundle, classifier) = load_inference(&checkpoint, &tree)?;
        let dataset = load_split(config, &tree, split)?;
        let preds = score_dataset(&bundle, &classifier, &dataset)?;

        let predictions_csv = out_dir.join("predictions.csv");
        dump_predictions(&preds, &predictions_csv)?;

        let macro_auc = macro_metric(&tree, &preds, config.eval.gamma)?;
        let mut metrics: BTreeMap<String, f64> =
            [("avg_auc".to_string(), macro_auc)].into_iter().collect();
        if tree.nodes.iter().any(|n| n.kind == GroupKind::ProductGroup) {
            let grouping = PathologyGrouping::from_template(&tree);
            let out = location_averaged_auc(&preds, &grouping, tree.num_classes())?;
            for (name, auc) in out.per_pathology {
                metrics.insert(name, auc);
            }
        }
        let metrics_json = out_dir.join("metrics.json");
        std::fs::write(&metrics_json, serde_json::to_string_pretty(&metrics)?)
            .map_err(|e| Error::io(metrics_json.display().to_string(), e))?;
        emit_results_table(
            &[LabeledRun {
                label: format!("eval {split}"),
                metrics,
            }],
            &out_dir.join("results"),
        )?;
        Ok(EvalOutputs {
            metrics_json,
            predictions_csv,
            macro_auc,
        })
    })();
    finalize(&mut manifest, &manifest_path, started, outcome)
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

pub struct ReportOutputs {
    pub text: String,
    pub sidecar: serde_json::Value,
}

pub fn cmd_report(
    checkpoint: &Path,
    image_path: &Path,
    template_path: &Path,
    decision: &DecisionConfig,
) -> Result<ReportOutputs> {
    let tree = parse_template_file(template_path)?;
    let (bundle, classifier) = load_inference(checkpoint, &tree)?;
    let raw = crate::data::image::read_png(image_path)?;
    let pixels = crate::data::image::resize_and_pad(&raw, bundle.config.input_size);
    let embedding = bundle.encode_image(&pixels.to_array())?;
    let scores = classify(&classifier, &embedding)?;
    let probabilities = predict_probabilities(&tree, &scores, decision.gamma)?;
    let report = render_report(&tree, &scores, decision)?;
    let sidecar = serde_json::json!({
        "image": image_path.display().to_string(),
        "checkpoint": checkpoint.display().to_string(),
        "lines": report.lines,
        "scores": scores,
        "probabilities": probabilities,
    });
    Ok(ReportOutputs {
        text: report.text(),
        sidecar,
    })
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

/// Shots-vs-AUC curves per init mode from a finetune aggregate.csv.
pub fn cmd_plot(metrics_dir: &Path, out_path: &Path) -> Result<PathBuf> {
    use plotters::prelude::*;

    let aggregate = metrics_dir.join("aggregate.csv");
    if !aggregate.exists() {
        return Err(Error::Config(format!(
            "no aggregate.csv under {}",
            metrics_dir.display()
        )));
    }
    let text = std::fs::read_to_string(&aggregate)
        .map_err(|e| Error::io(aggregate.display().to_string(), e))?;
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            continue;
        }
        let shots: f64 = fields[0]
            .parse()
            .map_err(|_| Error::Data(format!("bad shots value `{}`", fields[0])))?;
        let auc: f64 = fields[2]
            .parse()
            .map_err(|_| Error::Data(format!("bad auc value `{}`", fields[2])))?;
        series.entry(fields[1].to_string()).or_default().push((shots, auc));
    }
    if series.is_empty() {
        return Err(Error::Data(format!(
            "{} has no data rows",
            aggregate.display()
        )));
    }
    for points in series.values_mut() {
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    }

    let max_shots = series
        .values()
        .flat_map(|p| p.iter().map(|(s, _)| *s))
        .fold(1.0f64, f64::max);
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    {
        let root = SVGBackend::new(out_path, (800, 500)).into_drawing_area();
        root.fill(&WHITE)
            .map_err(|e| Error::Data(format!("plot: {e}")))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(20)
            .caption("macro AUC vs shots per init mode", ("sans-serif", 22))
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d((1.0..max_shots).log_scale(), 0.4f64..1.0f64)
            .map_err(|e| Error::Data(format!("plot: {e}")))?;
        chart
            .configure_mesh()
            .x_desc("shots per class")
            .y_desc("macro AUC")
            .draw()
            .map_err(|e| Error::Data(format!("plot: {e}")))?;
        let palette = [RED, BLUE, GREEN, MAGENTA];
        for (i, (name, points)) in series.iter().enumerate() {
            let color = palette[i % palette.len()];
            chart
                .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
                .map_err(|e| Error::Data(format!("plot: {e}")))?
                .label(name.clone())
                .legend(move |(x, y)| {
                    plotters::element::PathElement::new(vec![(x, y), (x + 18, y)], color)
                });
            chart
                .draw_series(
                    points
                        .iter()
                        .map(|&(x, y)| Circle::new((x, y), 3, color.filled())),
                )
                .map_err(|e| Error::Data(format!("plot: {e}")))?;
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.85))
            .draw()
            .map_err(|e| Error::Data(format!("plot: {e}")))?;
        root.present().map_err(|e| Error::Data(format!("plot: {e}")))?;
    }
    Ok(out_path.to_path_buf())
}
