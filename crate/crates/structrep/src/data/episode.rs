//! Few-shot episode construction: k positive images per class, or uniform
//! sampling for the "sampled" setting.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, DatasetIndex};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Exactly k distinct positive images per class (with replacement plus a
    /// warning when a class has fewer than k positives).
    KShot,
    /// epoch_images_per_class x |classes| images drawn uniformly from the
    /// whole dataset.
    Sampled,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub mode: SamplingMode,
    pub k: usize,
    pub classes: Vec<usize>,
    pub seed: u64,
    pub epoch_images_per_class: usize,
}

impl EpisodeSpec {
    pub fn k_shot(k: usize, classes: Vec<usize>, seed: u64) -> Self {
        EpisodeSpec {
            mode: SamplingMode::KShot,
            k,
            classes,
            seed,
            epoch_images_per_class: 128,
        }
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        if self.mode == SamplingMode::KShot && self.k == 0 {
            return Err(Error::Config("k must be >= 1 for k-shot episodes".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("episode needs at least one class".into()));
        }
        if let Some(&bad) = self.classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Config(format!(
                "episode references class {bad}, dataset has {num_classes}"
            )));
        }
        Ok(())
    }
}

/// Record indices making up one episode, in sampling order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub records: Vec<usize>,
    pub warnings: Vec<String>,
}

pub fn sample_episode(dataset: &DatasetIndex, spec: &EpisodeSpec) -> Result<Episode> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot sample an episode from an empty dataset".into()));
    }
    spec.validate(dataset.num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "episode", 0));
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    match spec.mode {
        SamplingMode::KShot => {
            for &class in &spec.classes {
                let positives: Vec<usize> = dataset
                    .records
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.labels.valid[class] && r.labels.y[class] > 0)
                    .map(|(i, _)| i)
                    .collect();
                if positives.is_empty() {
                    return Err(Error::Data(format!(
                        "class {class} has no positive images to sample from"
                    )));
                }
                if positives.len() >= spec.k {
                    let mut pool = positives;
                    pool.shuffle(&mut rng);
                    records.extend_from_slice(&pool[..spec.k]);
                } else {
                    let msg = format!(
                        "class {class}: only {} positive image(s) for k={}, sampling with replacement",
                        positives.len(),
                        spec.k
                    );
                    log::warn!("{msg}");
                    warnings.push(msg);
                    for _ in 0..spec.k {
                        records.push(positives[rng.gen_range(0..positives.len())]);
                    }
                }
            }
        }
        SamplingMode::Sampled => {
            let total = spec.epoch_images_per_class * spec.classes.len();
            for _ in 0..total {
                records.push(rng.gen_range(0..dataset.len()));
            }
        }
    }
    Ok(Episode { records, warnings })
}
