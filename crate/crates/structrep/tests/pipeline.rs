//! Trainer-level integration: pretraining and fine-tuning contracts on a
//! tiny synthetic dataset (determinism, zero-epoch no-ops, divergence
//! handling).

use structrep::classifier::{finetune, init_classifier, FinetuneConfig};
use structrep::data::{
    load_dataset, sample_episode, synth_generate, DatasetIndex, EpisodeSpec, SynthMode, SynthSpec,
    UnknownFinding,
};
use structrep::encoders::{EncoderBundle, EncoderConfig};
use structrep::error::Error;
use structrep::nn::ImageEncoderConfig;
use structrep::pretrain::{pretrain, PretrainConfig};
use structrep::template::{expand_prompts, parse_template_file, TemplateTree};

const SIZE: usize = 32;

fn tiny_spec(count: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        mode: SynthMode::Product {
            attributes: vec!["opacity".into(), "nodule".into()],
            locations: vec!["left zone".into(), "right zone".into()],
            observed_pairs: None,
            positive_prior: 0.25,
        },
        image_size: SIZE,
        count,
        seed,
        val_fraction: 0.25,
        test_fraction: 0.0,
        noise: 0.05,
        paraphrase: true,
    }
}

fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 16,
        input_size: SIZE,
        image: ImageEncoderConfig {
            in_channels: 1,
            channels: vec![4, 8],
        },
        text_embed_dim: 12,
        text_hidden_dim: 16,
        max_tokens: 12,
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    tree: TemplateTree,
    train: DatasetIndex,
    val: DatasetIndex,
}

fn fixture(count: usize, seed: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let summary = synth_generate(&tiny_spec(count, seed), dir.path()).unwrap();
    let tree = parse_template_file(&summary.template_path).unwrap();
    let (train, _) = load_dataset(
        &summary.label_paths["train"],
        &summary.image_dir,
        &tree,
        SIZE,
        UnknownFinding::Error,
    )
    .unwrap();
    let (val, _) = load_dataset(
        &summary.label_paths["val"],
        &summary.image_dir,
        &tree,
        SIZE,
        UnknownFinding::Error,
    )
    .unwrap();
    Fixture {
        _dir: dir,
        tree,
        train,
        val,
    }
}

fn fresh_bundle(fx: &Fixture, seed: u64) -> EncoderBundle {
    let mut corpus: Vec<&str> = fx.train.all_sentences();
    let prompts = expand_prompts(&fx.tree);
    corpus.extend(prompts.prompts.iter().map(|s| s.as_str()));
    EncoderBundle::new(tiny_encoder_config(), corpus, seed)
}

fn pretrain_config(epochs: usize, seed: u64) -> PretrainConfig {
    PretrainConfig {
        epochs,
        batch_size: 16,
        lr: 1e-3,
        warmup_epochs: 1,
        weight_decay: 0.1,
        seed,
        eval_batch: 16,
        ..PretrainConfig::default()
    }
}

#[test]
fn pretrain_zero_epochs_leaves_bundle_unchanged() {
    let fx = fixture(40, 1);
    let mut bundle = fresh_bundle(&fx, 3);
    let before: Vec<_> = bundle.params().iter().map(|p| p.value.clone()).collect();
    let report = pretrain(&mut bundle, &fx.train, &fx.val, &pretrain_config(0, 5)).unwrap();
    assert!(report.epochs.is_empty());
    for (p, prev) in bundle.params().iter().zip(before.iter()) {
        assert_eq!(&p.value, prev, "{} changed", p.name);
    }
}

#[test]
fn pretrain_same_seed_yields_identical_parameters() {
    let fx = fixture(48, 2);
    let mut a = fresh_bundle(&fx, 7);
    let mut b = fresh_bundle(&fx, 7);
    let ra = pretrain(&mut a, &fx.train, &fx.val, &pretrain_config(2, 9)).unwrap();
    let rb = pretrain(&mut b, &fx.train, &fx.val, &pretrain_config(2, 9)).unwrap();
    for (pa, pb) in a.params().iter().zip(b.params().iter()) {
        assert_eq!(pa.value, pb.value, "{} differs between identical runs", pa.name);
    }
    let la: Vec<f64> = ra.epochs.iter().map(|e| e.train_loss).collect();
    let lb: Vec<f64> = rb.epochs.iter().map(|e| e.train_loss).collect();
    assert_eq!(la, lb);
}

#[test]
fn untrained_bundle_retrieval_is_near_chance() {
    let fx = fixture(400, 8);
    let bundle = fresh_bundle(&fx, 23);
    use ndarray::Array2;
    let d = bundle.config.embed_dim;
    let n = fx.val.len();
    let mut images = Array2::zeros((n, d));
    let mut texts = Array2::zeros((n, d));
    for i in 0..n {
        let pixels = fx.val.load_pixels(i).unwrap();
        let img = bundle.encode_image(&pixels.to_array()).unwrap();
        images.row_mut(i).assign(img.as_array());
        let sentence = fx.val.records[i].record.sentences[0].text.clone();
        let txt = bundle.encode_text(&sentence).unwrap();
        texts.row_mut(i).assign(txt.as_array());
    }
    let b = 16usize;
    let acc = structrep::pretrain::retrieval_top1(&images, &texts, b);
    let p = 1.0 / b as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!(
        (acc - p).abs() <= 3.0 * sigma,
        "untrained retrieval {acc:.4} vs chance {p:.4} (3 sigma {:.4}, n={n})",
        3.0 * sigma
    );
}

#[test]
fn temperature_stays_clamped_during_training() {
    let fx = fixture(48, 7);
    let mut bundle = fresh_bundle(&fx, 29);
    let mut config = pretrain_config(3, 31);
    // Aggressive lr drives tau against its bounds quickly.
    config.lr = 0.5;
    let _ = pretrain(&mut bundle, &fx.train, &fx.val, &config);
    let tau = bundle.tau();
    assert!(
        (1e-3..=1.0).contains(&tau),
        "temperature {tau} escaped its clamp range"
    );
}

#[test]
fn pretrain_divergence_aborts_with_error() {
    let fx = fixture(40, 3);
    let mut bundle = fresh_bundle(&fx, 11);
    let mut config = pretrain_config(3, 13);
    config.lr = 1e18;
    config.warmup_epochs = 0;
    match pretrain(&mut bundle, &fx.train, &fx.val, &config) {
        Err(Error::Divergence(_)) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn finetune_zero_epochs_returns_zero_shot_classifier() {
    let fx = fixture(40, 4);
    let mut bundle = fresh_bundle(&fx, 15);
    let prompts = expand_prompts(&fx.tree);
    let mut clf = init_classifier(&prompts, &bundle).unwrap();
    let before = clf.weight.value.clone();
    let episode = sample_episode(
        &fx.train,
        &EpisodeSpec::k_shot(1, (0..fx.tree.num_classes()).collect(), 1),
    )
    .unwrap();
    let config = FinetuneConfig {
        epochs: 0,
        ..FinetuneConfig::default()
    };
    let report = finetune(
        &mut clf,
        &mut bundle,
        &fx.tree,
        &fx.train,
        &episode,
        Some(&fx.val),
        &config,
    )
    .unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(clf.weight.value, before);
}

#[test]
fn finetune_same_seed_yields_identical_weights() {
    let fx = fixture(60, 5);
    let prompts = expand_prompts(&fx.tree);
    let episode = sample_episode(
        &fx.train,
        &EpisodeSpec::k_shot(2, (0..fx.tree.num_classes()).collect(), 21),
    )
    .unwrap();
    let config = FinetuneConfig {
        gamma: 50.0,
        epochs: 2,
        lr: 5e-3,
        batch_size: 16,
        epoch_images_per_class: 8,
        warmup_epochs: 1,
        seed: 33,
        unfreeze_trunk: false,
    };
    let run = |seed: u64| {
        let mut bundle = fresh_bundle(&fx, 17);
        let mut clf = init_classifier(&prompts, &bundle).unwrap();
        let mut cfg = config.clone();
        cfg.seed = seed;
        finetune(
            &mut clf,
            &mut bundle,
            &fx.tree,
            &fx.train,
            &episode,
            Some(&fx.val),
            &cfg,
        )
        .unwrap();
        clf.weight.value
    };
    let a = run(33);
    let b = run(33);
    let c = run(34);
    assert_eq!(a, b, "same seed must reproduce weights exactly");
    assert_ne!(a, c, "different seed should differ");
}

#[test]
fn finetune_with_unfrozen_trunk_changes_trunk_parameters() {
    let fx = fixture(40, 6);
    let mut bundle = fresh_bundle(&fx, 19);
    let trunk_before: Vec<_> = bundle
        .image_trunk
        .params()
        .iter()
        .map(|p| p.value.clone())
        .collect();
    let prompts = expand_prompts(&fx.tree);
    let mut clf = init_classifier(&prompts, &bundle).unwrap();
    let episode = sample_episode(
        &fx.train,
        &EpisodeSpec::k_shot(1, (0..fx.tree.num_classes()).collect(), 2),
    )
    .unwrap();
    let config = FinetuneConfig {
        epochs: 1,
        lr: 1e-3,
        batch_size: 8,
        epoch_images_per_class: 4,
        warmup_epochs: 0,
        seed: 3,
        unfreeze_trunk: true,
        gamma: 50.0,
    };
    finetune(
        &mut clf,
        &mut bundle,
        &fx.tree,
        &fx.train,
        &episode,
        None,
        &config,
    )
    .unwrap();
    let changed = bundle
        .image_trunk
        .params()
        .iter()
        .zip(trunk_before.iter())
        .any(|(p, prev)| p.value != *prev);
    assert!(changed, "unfrozen trunk should receive updates");
}
