//! Contrastive image-text pretraining: symmetric cross-entropy over the
//! temperature-scaled cosine similarity matrix of in-batch pairs, with
//! in-batch top-1 retrieval accuracy as the monitoring metric.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment, derive_seed, sample_report_sentence, AugmentationConfig, DatasetIndex,
};
use crate::encoders::{EncoderBundle, TEMPERATURE_MAX, TEMPERATURE_MIN};
use crate::error::{Error, Result};
use crate::nn::{AdamW, GradStore, WarmupCosine};

/// A batch of matched (image, text) unit embeddings; row i of each matrix is
/// one pair.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub image_embeddings: Array2<f64>,
    pub text_embeddings: Array2<f64>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.image_embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Logits L[i][j] = <img_i, txt_j> / tau.
pub fn similarity_matrix(batch: &ContrastiveBatch, tau: f64) -> Result<Array2<f64>> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::Config(format!(
            "contrastive batch needs >= 2 pairs (no negatives otherwise), got {b}"
        )));
    }
    if batch.text_embeddings.nrows() != b
        || batch.image_embeddings.ncols() != batch.text_embeddings.ncols()
    {
        return Err(Error::DimensionMismatch(format!(
            "image batch {:?} vs text batch {:?}",
            batch.image_embeddings.dim(),
            batch.text_embeddings.dim()
        )));
    }
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let mut logits = batch.image_embeddings.dot(&batch.text_embeddings.t());
    logits /= tau;
    Ok(logits)
}

/// Symmetric contrastive loss: mean row-wise cross-entropy with target j=i,
/// averaged with the column-wise counterpart.
pub fn contrastive_loss(logits: &Array2<f64>) -> Result<f64> {
    Ok(contrastive_loss_grad(logits)?.0)
}

/// Loss and gradient w.r.t. the logits.
pub fn contrastive_loss_grad(logits: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let (rows, cols) = logits.dim();
    if rows != cols {
        return Err(Error::DimensionMismatch(format!(
            "contrastive logits must be square, got {rows}x{cols}"
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite contrastive logits".into()));
    }
    let b = rows;
    let mut grad = Array2::zeros((b, b));
    let mut loss = 0.0;

    // Row direction (image -> text).
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        loss += max + denom.ln() - logits[[i, i]];
        for j in 0..b {
            let p = (logits[[i, j]] - max).exp() / denom;
            grad[[i, j]] += (p - if i == j { 1.0 } else { 0.0 }) / (2.0 * b as f64);
        }
    }
    // Column direction (text -> image).
    for j in 0..b {
        let col = logits.column(j);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = col.iter().map(|&v| (v - max).exp()).sum();
        loss += max + denom.ln() - logits[[j, j]];
        for i in 0..b {
            let p = (logits[[i, j]] - max).exp() / denom;
            grad[[i, j]] += (p - if i == j { 1.0 } else { 0.0 }) / (2.0 * b as f64);
        }
    }
    Ok((loss / (2.0 * b as f64), grad))
}

/// Fraction of rows whose argmax similarity is the matched pair, over
/// batches of `batch_size` (full batches only; a single short batch is used
/// when fewer rows exist).
pub fn retrieval_top1(images: &Array2<f64>, texts: &Array2<f64>, batch_size: usize) -> f64 {
    let n = images.nrows();
    if n == 0 {
        return 0.0;
    }
    let effective = batch_size.min(n).max(1);
    let full_batches = n / effective;
    let mut hits = 0usize;
    let mut total = 0usize;
    for b in 0..full_batches.max(1) {
        let start = b * effective;
        let end = (start + effective).min(n);
        if end - start < 2 {
            continue;
        }
        for i in start..end {
            let anchor = images.row(i);
            let mut best = start;
            let mut best_sim = f64::NEG_INFINITY;
            for j in start..end {
                let sim = anchor.dot(&texts.row(j));
                if sim > best_sim {
                    best_sim = sim;
                    best = j;
                }
            }
            if best == i {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Batch size for the retrieval metric (the headline number is at 64).
    pub eval_batch: usize,
    pub augment: AugmentationConfig,
    /// First epoch number for logging when resuming.
    #[serde(default)]
    pub epoch_offset: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 3e-4,
            warmup_epochs: 1,
            weight_decay: 0.1,
            seed: 0,
            eval_batch: 64,
            augment: AugmentationConfig::default(),
            epoch_offset: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_retrieval_top1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: Vec<PretrainEpoch>,
    pub best_epoch: Option<usize>,
    pub best_val_retrieval: Option<f64>,
}

/// Embed the fixed validation pairs (no augmentation; sentence choice is a
/// pure function of the seed).
fn embed_validation(
    bundle: &EncoderBundle,
    val: &DatasetIndex,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let d = bundle.config.embed_dim;
    let rows: Vec<(Array1<f64>, Array1<f64>)> = (0..val.len())
        .into_par_iter()
        .map(|i| {
            let pixels = val.load_pixels(i)?;
            let img = bundle.encode_image(&pixels.to_array())?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "val-sentence", i as u64));
            let sentence = sample_report_sentence(&val.records[i].record, &mut rng)?;
            let txt = bundle.encode_text(sentence)?;
            Ok((img.as_array().clone(), txt.as_array().clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut images = Array2::zeros((rows.len(), d));
    let mut texts = Array2::zeros((rows.len(), d));
    for (i, (img, txt)) in rows.iter().enumerate() {
        images.row_mut(i).assign(img);
        texts.row_mut(i).assign(txt);
    }
    Ok((images, texts))
}

fn validation_metrics(
    bundle: &EncoderBundle,
    val: &DatasetIndex,
    config: &PretrainConfig,
) -> Result<(Option<f64>, Option<f64>)> {
    if val.len() < 2 {
        return Ok((None, None));
    }
    let (images, texts) = embed_validation(bundle, val, config.seed)?;
    let retrieval = retrieval_top1(&images, &texts, config.eval_batch);
    // Validation loss over contiguous batches.
    let mut losses = Vec::new();
    let bs = config.batch_size.min(val.len());
    let mut start = 0;
    while start + 2 <= val.len() {
        let end = (start + bs).min(val.len());
        if end - start < 2 {
            break;
        }
        let batch = ContrastiveBatch {
            image_embeddings: images.slice(ndarray::s![start..end, ..]).to_owned(),
            text_embeddings: texts.slice(ndarray::s![start..end, ..]).to_owned(),
        };
        let logits = similarity_matrix(&batch, bundle.tau())?;
        losses.push(contrastive_loss(&logits)?);
        start = end;
    }
    let loss = if losses.is_empty() {
        None
    } else {
        Some(losses.iter().sum::<f64>() / losses.len() as f64)
    };
    Ok((loss, Some(retrieval)))
}

/// Train the bundle on (image, sampled sentence) pairs. Returns per-epoch
/// metrics; `bundle` ends at the parameters of the best validation-retrieval
/// epoch. Non-finite losses abort with the best parameters restored.
pub fn pretrain(
    bundle: &mut EncoderBundle,
    train: &DatasetIndex,
    val: &DatasetIndex,
    config: &PretrainConfig,
) -> Result<PretrainReport> {
    let mut report = PretrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_retrieval: None,
    };
    if config.epochs == 0 {
        return Ok(report);
    }
    if train.len() < 2 {
        return Err(Error::Data(
            "pretraining needs at least 2 training pairs".into(),
        ));
    }
    config.augment.validate()?;

    // All training pixels fit at desk scale; load once.
    let pixels: Vec<crate::data::Image> = (0..train.len())
        .into_par_iter()
        .map(|i| train.load_pixels(i))
        .collect::<Result<Vec<_>>>()?;

    let steps_per_epoch = (train.len() / config.batch_size).max(1);
    let schedule = WarmupCosine {
        base_lr: config.lr,
        warmup_steps: config.warmup_epochs * steps_per_epoch,
        total_steps: config.epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(config.weight_decay);
    let mut best_snapshot: Option<Vec<Array2<f64>>> = None;
    let mut step = 0usize;

    for local_epoch in 0..config.epochs {
        let epoch = config.epoch_offset + local_epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epoch_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "pretrain-epoch", epoch as u64));
        order.shuffle(&mut epoch_rng);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let lr = schedule.lr(step);
            step += 1;

            // Per-sample augment + forward, in parallel; RNG streams are a
            // pure function of (seed, epoch, position).
            let forwards: Vec<_> = batch
                .par_iter()
                .enumerate()
                .map(|(pos, &idx)| {
                    let draw = (batch_no * config.batch_size + pos) as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        config.seed,
                        "pretrain-draw",
                        (epoch as u64) << 32 | draw,
                    ));
                    let img = augment(&pixels[idx], &config.augment, train.target_size, &mut rng)?;
                    let arr: Array3<f64> = img.to_array();
                    let (img_emb, img_cache) = bundle.encode_image_cached(&arr)?;
                    let sentence = sample_report_sentence(&train.records[idx].record, &mut rng)?;
                    let (txt_emb, txt_cache) = bundle.encode_text_cached(sentence)?;
                    Ok((img_emb, img_cache, txt_emb, txt_cache))
                })
                .collect::<Result<Vec<_>>>()?;

            let b = forwards.len();
            let d = bundle.config.embed_dim;
            let mut images = Array2::zeros((b, d));
            let mut texts = Array2::zeros((b, d));
            for (i, (img_emb, _, txt_emb, _)) in forwards.iter().enumerate() {
                images.row_mut(i).assign(img_emb.as_array());
                texts.row_mut(i).assign(txt_emb.as_array());
            }
            let tau = bundle.tau();
            let cbatch = ContrastiveBatch {
                image_embeddings: images,
                text_embeddings: texts,
            };
            let logits = similarity_matrix(&cbatch, tau)?;
            let (loss, d_logits) = contrastive_loss_grad(&logits)?;
            if !loss.is_finite() {
                restore(bundle, &best_snapshot);
                return Err(Error::Divergence(format!(
                    "non-finite contrastive loss at epoch {epoch}; best checkpoint restored"
                )));
            }
            loss_sum += loss;
            loss_count += 1;

            // d(loss)/d(embeddings) and d(loss)/d(tau).
            let d_images = d_logits.dot(&cbatch.text_embeddings) / tau;
            let d_texts = d_logits.t().dot(&cbatch.image_embeddings) / tau;
            let d_tau = -(&d_logits * &logits).sum() / tau;

            let per_sample: Vec<GradStore> = forwards
                .par_iter()
                .enumerate()
                .map(|(i, (_, img_cache, _, txt_cache))| {
                    let mut grads = GradStore::new();
                    bundle.backward_image(img_cache, &d_images.row(i).to_owned(), &mut grads, true);
                    bundle.backward_text(txt_cache, &d_texts.row(i).to_owned(), &mut grads);
                    grads
                })
                .collect();
            let mut grads = GradStore::new();
            for g in per_sample {
                grads.merge(g);
            }
            grads.add("temperature", Array2::from_elem((1, 1), d_tau));
            if !grads.is_finite() {
                restore(bundle, &best_snapshot);
                return Err(Error::Divergence(format!(
                    "non-finite gradients at epoch {epoch}; best checkpoint restored"
                )));
            }

            opt.step(&mut bundle.params_mut(), &grads, lr);
            let t = bundle.temperature.value[[0, 0]];
            bundle.temperature.value[[0, 0]] = t.clamp(TEMPERATURE_MIN, TEMPERATURE_MAX);
        }

        let (val_loss, val_retrieval) = validation_metrics(bundle, val, config)?;
        if let Some(r) = val_retrieval {
            let better = report
                .best_val_retrieval
                .map(|best| r > best)
                .unwrap_or(true);
            if better {
                report.best_val_retrieval = Some(r);
                report.best_epoch = Some(epoch);
                best_snapshot = Some(bundle.params().iter().map(|p| p.value.clone()).collect());
            }
        }
        report.epochs.push(PretrainEpoch {
            epoch,
            train_loss: loss_sum / loss_count.max(1) as f64,
            val_loss,
            val_retrieval_top1: val_retrieval,
        });
    }

    restore(bundle, &best_snapshot);
    Ok(report)
}

fn restore(bundle: &mut EncoderBundle, snapshot: &Option<Vec<Array2<f64>>>) {
    if let Some(values) = snapshot {
        for (param, value) in bundle.params_mut().into_iter().zip(values.iter()) {
            param.value = value.clone();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit_rows(b: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m: Array2<f64> = Array2::from_shape_fn((b, d), |_| rng.gen_range(-1.0..1.0));
        for mut row in m.outer_iter_mut() {
            let norm = row.dot(&row).sqrt();
            row /= norm;
        }
        m
    }

    #[test]
    fn identical_matrices_give_unit_diagonal() {
        let m = unit_rows(4, 8, 1);
        let batch = ContrastiveBatch {
            image_embeddings: m.clone(),
            text_embeddings: m,
        };
        let logits = similarity_matrix(&batch, 1.0).unwrap();
        for i in 0..4 {
            assert!((logits[[i, i]] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthonormal_rows_give_identity() {
        let mut img = Array2::zeros((3, 4));
        for i in 0..3 {
            img[[i, i]] = 1.0;
        }
        let batch = ContrastiveBatch {
            image_embeddings: img.clone(),
            text_embeddings: img,
        };
        let logits = similarity_matrix(&batch, 1.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((logits[[i, j]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_matches_double_loop_oracle() {
        let img = unit_rows(6, 10, 2);
        let txt = unit_rows(6, 10, 3);
        let tau = 0.2;
        let batch = ContrastiveBatch {
            image_embeddings: img.clone(),
            text_embeddings: txt.clone(),
        };
        let logits = similarity_matrix(&batch, tau).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let mut dot = 0.0;
                for k in 0..10 {
                    dot += img[[i, k]] * txt[[j, k]];
                }
                assert!((logits[[i, j]] - dot / tau).abs() < 1e-6);
                assert!(dot.abs() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let m = unit_rows(1, 4, 4);
        let batch = ContrastiveBatch {
            image_embeddings: m.clone(),
            text_embeddings: m,
        };
        assert!(similarity_matrix(&batch, 1.0).is_err());
    }

    #[test]
    fn uniform_logits_cost_ln_b() {
        for b in [2usize, 4, 64] {
            let logits = Array2::zeros((b, b));
            let loss = contrastive_loss(&logits).unwrap();
            assert!(
                (loss - (b as f64).ln()).abs() < 1e-9,
                "B={b}: {loss} vs {}",
                (b as f64).ln()
            );
        }
    }

    #[test]
    fn dominant_diagonal_drives_loss_to_zero() {
        // diag 100, off-diag 0: loss ~ ln(1 + 63 e^-100).
        let b = 64;
        let mut logits = Array2::zeros((b, b));
        for i in 0..b {
            logits[[i, i]] = 100.0;
        }
        let loss = contrastive_loss(&logits).unwrap();
        assert!(loss < 1e-6, "{loss}");
        let expected = (63.0 * (-100.0f64).exp()).ln_1p();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_is_transpose_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let logits = Array2::from_shape_fn((8, 8), |_| rng.gen_range(-3.0..3.0));
            let a = contrastive_loss(&logits).unwrap();
            let b = contrastive_loss(&logits.t().to_owned()).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_is_invariant_under_consistent_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = 6;
        let logits = Array2::from_shape_fn((b, b), |_| rng.gen_range(-2.0..2.0));
        let base = contrastive_loss(&logits).unwrap();
        let perm = [3usize, 1, 5, 0, 4, 2];
        let mut permuted = Array2::zeros((b, b));
        for i in 0..b {
            for j in 0..b {
                permuted[[i, j]] = logits[[perm[i], perm[j]]];
            }
        }
        let p = contrastive_loss(&permuted).unwrap();
        assert!((base - p).abs() < 1e-9);
    }

    #[test]
    fn non_finite_logits_error() {
        let mut logits = Array2::zeros((2, 2));
        logits[[0, 1]] = f64::NAN;
        assert!(contrastive_loss(&logits).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_on_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let logits = Array2::from_shape_fn((8, 8), |_| rng.gen_range(-2.0..2.0));
            let (_, grad) = contrastive_loss_grad(&logits).unwrap();
            let h = 1e-6;
            for i in 0..8 {
                for j in 0..8 {
                    let mut p = logits.clone();
                    p[[i, j]] += h;
                    let mut m = logits.clone();
                    m[[i, j]] -= h;
                    let fd = (contrastive_loss(&p).unwrap() - contrastive_loss(&m).unwrap())
                        / (2.0 * h);
                    let denom = fd.abs().max(grad[[i, j]].abs()).max(1e-8);
                    assert!(
                        (fd - grad[[i, j]]).abs() / denom < 1e-4,
                        "[{i},{j}]: fd {fd} vs {}",
                        grad[[i, j]]
                    );
                }
            }
        }
    }

    #[test]
    fn retrieval_of_perfectly_aligned_embeddings_is_one() {
        let m = unit_rows(32, 8, 9);
        assert_eq!(retrieval_top1(&m, &m, 16), 1.0);
    }

    #[test]
    fn retrieval_of_random_embeddings_is_near_chance() {
        let b = 16usize;
        let n = 320usize;
        let img = unit_rows(n, 32, 10);
        let txt = unit_rows(n, 32, 11);
        let acc = retrieval_top1(&img, &txt, b);
        let p = 1.0 / b as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (acc - p).abs() < 3.0 * sigma + 1e-9,
            "acc {acc}, chance {p}, sigma {sigma}"
        );
    }
}
