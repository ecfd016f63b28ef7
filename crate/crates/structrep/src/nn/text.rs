//! Bag-of-token-embeddings text trunk with positional mixing: token
//! embeddings are scaled elementwise by a learned per-position gain, mean
//! pooled, then passed through a two-layer MLP.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::gaussian;
use super::{GradStore, Param};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    embedding: Param, // [vocab, embed_dim]
    pos_gain: Param,  // [max_len, embed_dim], init 1
    fc1_weight: Param,
    fc1_bias: Param,
    fc2_weight: Param,
    fc2_bias: Param,
}

pub struct TextTrunkCache {
    tokens: Vec<usize>,
    pooled: Array1<f64>,
    hidden_pre: Array1<f64>,
    hidden: Array1<f64>,
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let emb_scale = (1.0 / config.embed_dim as f64).sqrt();
        let embedding = Array2::from_shape_fn((config.vocab_size, config.embed_dim), |_| {
            gaussian(rng) * emb_scale
        });
        let fc1_scale = (2.0 / config.embed_dim as f64).sqrt();
        let fc1_weight = Array2::from_shape_fn((config.hidden_dim, config.embed_dim), |_| {
            gaussian(rng) * fc1_scale
        });
        let fc2_scale = (2.0 / config.hidden_dim as f64).sqrt();
        let fc2_weight = Array2::from_shape_fn((config.out_dim, config.hidden_dim), |_| {
            gaussian(rng) * fc2_scale
        });
        TextEncoder {
            embedding: Param::new("text.embedding", embedding, true),
            pos_gain: Param::new(
                "text.pos_gain",
                Array2::ones((config.max_len, config.embed_dim)),
                false,
            ),
            fc1_weight: Param::new("text.fc1.weight", fc1_weight, true),
            fc1_bias: Param::new("text.fc1.bias", Array2::zeros((1, config.hidden_dim)), false),
            fc2_weight: Param::new("text.fc2.weight", fc2_weight, true),
            fc2_bias: Param::new("text.fc2.bias", Array2::zeros((1, config.out_dim)), false),
            config,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    /// Forward for a (non-empty, already truncated) token sequence.
    pub fn forward(&self, tokens: &[usize]) -> (Array1<f64>, TextTrunkCache) {
        assert!(!tokens.is_empty(), "text trunk needs at least one token");
        let d = self.config.embed_dim;
        let mut pooled = Array1::zeros(d);
        for (t, &tok) in tokens.iter().enumerate() {
            for j in 0..d {
                pooled[j] += self.embedding.value[[tok, j]] * self.pos_gain.value[[t, j]];
            }
        }
        pooled /= tokens.len() as f64;

        let mut hidden_pre = self.fc1_weight.value.dot(&pooled);
        for (h, &b) in hidden_pre.iter_mut().zip(self.fc1_bias.value.row(0)) {
            *h += b;
        }
        let hidden = hidden_pre.mapv(|v| v.max(0.0));
        let mut out = self.fc2_weight.value.dot(&hidden);
        for (o, &b) in out.iter_mut().zip(self.fc2_bias.value.row(0)) {
            *o += b;
        }
        (
            out,
            TextTrunkCache {
                tokens: tokens.to_vec(),
                pooled,
                hidden_pre,
                hidden,
            },
        )
    }

    pub fn backward(&self, cache: &TextTrunkCache, d_out: &Array1<f64>, grads: &mut GradStore) {
        // fc2
        let d_fc2_w = outer(d_out, &cache.hidden);
        grads.add(&self.fc2_weight.name, d_fc2_w);
        grads.add(&self.fc2_bias.name, row(d_out));
        let mut d_hidden = self.fc2_weight.value.t().dot(d_out);
        // ReLU
        for (dv, pv) in d_hidden.iter_mut().zip(cache.hidden_pre.iter()) {
            if *pv <= 0.0 {
                *dv = 0.0;
            }
        }
        // fc1
        let d_fc1_w = outer(&d_hidden, &cache.pooled);
        grads.add(&self.fc1_weight.name, d_fc1_w);
        grads.add(&self.fc1_bias.name, row(&d_hidden));
        let d_pooled = self.fc1_weight.value.t().dot(&d_hidden);

        // Pooling back to embeddings and positional gains.
        let d = self.config.embed_dim;
        let scale = 1.0 / cache.tokens.len() as f64;
        let mut d_emb = Array2::zeros((self.config.vocab_size, d));
        let mut d_pos = Array2::zeros((self.config.max_len, d));
        for (t, &tok) in cache.tokens.iter().enumerate() {
            for j in 0..d {
                let g = d_pooled[j] * scale;
                d_emb[[tok, j]] += g * self.pos_gain.value[[t, j]];
                d_pos[[t, j]] += g * self.embedding.value[[tok, j]];
            }
        }
        grads.add(&self.embedding.name, d_emb);
        grads.add(&self.pos_gain.name, d_pos);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.embedding,
            &mut self.pos_gain,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.embedding,
            &self.pos_gain,
            &self.fc1_weight,
            &self.fc1_bias,
            &self.fc2_weight,
            &self.fc2_bias,
        ]
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[[i, j]] = a[i] * b[j];
        }
    }
    out
}

fn row(v: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((1, v.len()));
    out.row_mut(0).assign(v);
    out
}
