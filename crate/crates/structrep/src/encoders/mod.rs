//! Encoder contracts: image -> embedding and sentence -> embedding, each via
//! a small trainable trunk followed by a bias-free projection into the shared
//! space and length normalization.
//!
//! The trunks here are deliberately small reference networks adequate for
//! synthetic data; anything honoring the same contract (raw feature ->
//! bias-free projection -> unit norm) can stand in behind it.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    matvec, matvec_backward, normalize, normalize_backward, GradStore, ImageEncoder,
    ImageEncoderConfig, ImageTrunkCache, Param, TextEncoder, TextEncoderConfig, TextTrunkCache,
};

mod checkpoint;
mod tokenizer;

pub use checkpoint::{load_container, save_container, Container, ContainerKind};
pub use tokenizer::Tokenizer;

/// Length-normalized vector in the shared image-text space.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEmbedding(Array1<f64>);

impl UnitEmbedding {
    /// Normalize a raw vector; errors on (near-)zero norm.
    pub fn from_raw(v: Array1<f64>) -> Result<Self> {
        let (unit, _) = normalize(&v)?;
        Ok(UnitEmbedding(unit))
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &UnitEmbedding) -> f64 {
        self.0.dot(&other.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Shared embedding dimension d.
    pub embed_dim: usize,
    /// Expected square input resolution.
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    pub image: ImageEncoderConfig,
    /// Text trunk sizing; vocab_size is filled in from the tokenizer.
    pub text_embed_dim: usize,
    pub text_hidden_dim: usize,
    pub max_tokens: usize,
}

fn default_input_size() -> usize {
    224
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 128,
            input_size: 224,
            image: ImageEncoderConfig::default(),
            text_embed_dim: 64,
            text_hidden_dim: 128,
            max_tokens: 32,
        }
    }
}

/// The trainable pair of encoders plus their projections into the shared
/// space. Projections carry no bias so cosine geometry is preserved.
#[derive(Debug, Clone)]
pub struct EncoderBundle {
    pub config: EncoderConfig,
    pub tokenizer: Tokenizer,
    pub image_trunk: ImageEncoder,
    pub text_trunk: TextEncoder,
    pub image_projection: Param, // [d, d_img], no bias
    pub text_projection: Param,  // [d, d_txt], no bias
    /// Contrastive temperature; trained and clamped by the pretrainer,
    /// persisted here so runs can resume.
    pub temperature: Param, // [1, 1]
}

pub const TEMPERATURE_INIT: f64 = 0.07;
pub const TEMPERATURE_MIN: f64 = 1e-3;
pub const TEMPERATURE_MAX: f64 = 1.0;

impl EncoderBundle {
    /// Fresh bundle with a vocabulary built from `corpus` sentences.
    pub fn new<'a>(
        config: EncoderConfig,
        corpus: impl IntoIterator<Item = &'a str>,
        seed: u64,
    ) -> Self {
        let tokenizer = Tokenizer::build(corpus, config.max_tokens);
        Self::with_tokenizer(config, tokenizer, seed)
    }

    pub fn with_tokenizer(config: EncoderConfig, tokenizer: Tokenizer, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image_trunk = ImageEncoder::new(config.image.clone(), &mut rng);
        let text_trunk = TextEncoder::new(
            TextEncoderConfig {
                vocab_size: tokenizer.vocab_size(),
                embed_dim: config.text_embed_dim,
                hidden_dim: config.text_hidden_dim,
                out_dim: config.text_embed_dim,
                max_len: config.max_tokens,
            },
            &mut rng,
        );
        let d = config.embed_dim;
        let image_projection = Param::new(
            "proj.image",
            init_projection(d, image_trunk.out_dim(), &mut rng),
            true,
        );
        let text_projection = Param::new(
            "proj.text",
            init_projection(d, text_trunk.out_dim(), &mut rng),
            true,
        );
        let temperature = Param::new(
            "temperature",
            Array2::from_elem((1, 1), TEMPERATURE_INIT),
            false,
        );
        EncoderBundle {
            config,
            tokenizer,
            image_trunk,
            text_trunk,
            image_projection,
            text_projection,
            temperature,
        }
    }

    pub fn tau(&self) -> f64 {
        self.temperature.value[[0, 0]]
    }

    /// Encode one preprocessed [1, h, w] image to a unit embedding.
    pub fn encode_image(&self, pixels: &Array3<f64>) -> Result<UnitEmbedding> {
        let (emb, _) = self.encode_image_cached(pixels)?;
        Ok(emb)
    }

    pub fn encode_image_cached(&self, pixels: &Array3<f64>) -> Result<(UnitEmbedding, ImageForwardCache)> {
        let (c, h, w) = pixels.dim();
        if c != self.config.image.in_channels
            || h != self.config.input_size
            || w != self.config.input_size
        {
            return Err(Error::DimensionMismatch(format!(
                "image is {c}x{h}x{w}, encoder expects {}x{s}x{s}",
                self.config.image.in_channels,
                s = self.config.input_size
            )));
        }
        let (feature, trunk) = self.image_trunk.forward(pixels);
        self.project_image_feature(feature, Some(trunk))
    }

    /// Projection + normalization from an already computed trunk feature
    /// (used when the trunk is frozen and features are cached).
    pub fn project_image_feature(
        &self,
        feature: Array1<f64>,
        trunk: Option<ImageTrunkCache>,
    ) -> Result<(UnitEmbedding, ImageForwardCache)> {
        let raw = matvec(&self.image_projection.value, &feature);
        let (unit, norm) = normalize(&raw)?;
        Ok((
            UnitEmbedding(unit.clone()),
            ImageForwardCache {
                feature,
                unit,
                norm,
                trunk,
            },
        ))
    }

    /// Encode a sentence to a unit embedding. Empty sentences error; overlong
    /// sentences truncate with a warning.
    pub fn encode_text(&self, sentence: &str) -> Result<UnitEmbedding> {
        let (emb, _) = self.encode_text_cached(sentence)?;
        Ok(emb)
    }

    pub fn encode_text_cached(&self, sentence: &str) -> Result<(UnitEmbedding, TextForwardCache)> {
        if sentence.trim().is_empty() {
            return Err(Error::Data("cannot encode an empty sentence".into()));
        }
        let (tokens, _) = self.tokenizer.tokenize(sentence);
        self.encode_tokens_cached(&tokens)
    }

    pub fn encode_tokens_cached(&self, tokens: &[usize]) -> Result<(UnitEmbedding, TextForwardCache)> {
        let (feature, trunk) = self.text_trunk.forward(tokens);
        let raw = matvec(&self.text_projection.value, &feature);
        let (unit, norm) = normalize(&raw)?;
        Ok((
            UnitEmbedding(unit.clone()),
            TextForwardCache {
                feature,
                unit,
                norm,
                trunk,
            },
        ))
    }

    /// Backward from d(loss)/d(unit image embedding). When `through_trunk`
    /// is false only the projection gradient is accumulated.
    pub fn backward_image(
        &self,
        cache: &ImageForwardCache,
        d_unit: &Array1<f64>,
        grads: &mut GradStore,
        through_trunk: bool,
    ) {
        let d_raw = normalize_backward(&cache.unit, cache.norm, d_unit);
        let d_feature = matvec_backward(
            &self.image_projection.value,
            &cache.feature,
            &d_raw,
            grads,
            &self.image_projection.name,
        );
        if through_trunk {
            let trunk = cache
                .trunk
                .as_ref()
                .expect("trunk cache required for through-trunk backward");
            self.image_trunk.backward(trunk, &d_feature, grads);
        }
    }

    pub fn backward_text(&self, cache: &TextForwardCache, d_unit: &Array1<f64>, grads: &mut GradStore) {
        let d_raw = normalize_backward(&cache.unit, cache.norm, d_unit);
        let d_feature = matvec_backward(
            &self.text_projection.value,
            &cache.feature,
            &d_raw,
            grads,
            &self.text_projection.name,
        );
        self.text_trunk.backward(&cache.trunk, &d_feature, grads);
    }

    /// All trainable parameters in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.image_trunk.params_mut();
        out.extend(self.text_trunk.params_mut());
        out.push(&mut self.image_projection);
        out.push(&mut self.text_projection);
        out.push(&mut self.temperature);
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.image_trunk.params();
        out.extend(self.text_trunk.params());
        out.push(&self.image_projection);
        out.push(&self.text_projection);
        out.push(&self.temperature);
        out
    }
}

pub struct ImageForwardCache {
    pub feature: Array1<f64>,
    unit: Array1<f64>,
    norm: f64,
    trunk: Option<ImageTrunkCache>,
}

pub struct TextForwardCache {
    pub feature: Array1<f64>,
    unit: Array1<f64>,
    norm: f64,
    trunk: TextTrunkCache,
}

fn init_projection(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let scale = (1.0 / cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| crate::nn::gaussian_sample(rng) * scale)
}

// ---------------------------------------------------------------------------
// Bundle persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct BundleHeaderExtra {
    config: EncoderConfig,
    vocab: Vec<String>,
    vocab_hash: u32,
}

pub fn save_bundle(bundle: &EncoderBundle, path: &std::path::Path) -> Result<()> {
    let extra = BundleHeaderExtra {
        config: bundle.config.clone(),
        vocab: bundle.tokenizer.vocab().to_vec(),
        vocab_hash: bundle.tokenizer.vocab_hash(),
    };
    let container = Container {
        kind: ContainerKind::EncoderBundle,
        extra: serde_json::to_value(&extra)?,
        params: bundle
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect(),
    };
    save_container(&container, path)
}

pub fn load_bundle(path: &std::path::Path) -> Result<EncoderBundle> {
    let container = load_container(path)?;
    if container.kind != ContainerKind::EncoderBundle {
        return Err(Error::Checkpoint(format!(
            "expected an encoder bundle, found {:?}",
            container.kind
        )));
    }
    bundle_from_container(&container)
}

pub(crate) fn bundle_from_container(container: &Container) -> Result<EncoderBundle> {
    let extra: BundleHeaderExtra = serde_json::from_value(container.extra.clone())?;
    let tokenizer = Tokenizer::from_vocab(extra.vocab, extra.config.max_tokens);
    if tokenizer.vocab_hash() != extra.vocab_hash {
        return Err(Error::Checkpoint(
            "vocabulary hash mismatch in checkpoint header".into(),
        ));
    }
    let mut bundle = EncoderBundle::with_tokenizer(extra.config, tokenizer, 0);
    for param in bundle.params_mut() {
        let stored = container.params.iter().find(|(n, _)| n == &param.name);
        let Some((_, value)) = stored else {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing parameter `{}`",
                param.name
            )));
        };
        if value.dim() != param.value.dim() {
            return Err(Error::Config(format!(
                "parameter `{}` has shape {:?} in checkpoint but {:?} in config",
                param.name,
                value.dim(),
                param.value.dim()
            )));
        }
        param.value = value.clone();
    }
    Ok(bundle)
}
