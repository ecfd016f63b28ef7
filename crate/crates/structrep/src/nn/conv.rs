//! Small convolutional image trunk: 3x3 stride-2 conv + ReLU stages followed
//! by global average pooling. Convolutions run as im2col + matmul so both
//! passes reduce to `ndarray::dot`.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GradStore, Param};

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub in_channels: usize,
    /// Output channels per stage; the last entry is the trunk feature size.
    pub channels: Vec<usize>,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            in_channels: 1,
            channels: vec![16, 32, 64, 128],
        }
    }
}

#[derive(Debug, Clone)]
struct ConvStage {
    weight: Param, // [c_out, c_in * 9]
    bias: Param,   // [1, c_out]
    c_in: usize,
    c_out: usize,
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub config: ImageEncoderConfig,
    stages: Vec<ConvStage>,
}

pub struct StageCache {
    col: Array2<f64>,          // [c_in*9, n_out]
    pre: Array2<f64>,          // [c_out, n_out], pre-ReLU
    in_shape: (usize, usize),  // (h, w)
    out_shape: (usize, usize), // (h2, w2)
}

pub struct ImageTrunkCache {
    stages: Vec<StageCache>,
    pool_area: usize,
    out_channels: usize,
}

fn out_dim(n: usize) -> usize {
    (n + 2 * PAD - KERNEL) / STRIDE + 1
}

fn im2col(x: &Array3<f64>, h2: usize, w2: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut col = Array2::zeros((c * KERNEL * KERNEL, h2 * w2));
    for ci in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * KERNEL + ky) * KERNEL + kx;
                for oy in 0..h2 {
                    let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w2 {
                        let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * w2 + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &Array2<f64>, c: usize, h: usize, w: usize, h2: usize, w2: usize) -> Array3<f64> {
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * KERNEL + ky) * KERNEL + kx;
                for oy in 0..h2 {
                    let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w2 {
                        let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[ci, iy as usize, ix as usize]] += dcol[[row, oy * w2 + ox]];
                    }
                }
            }
        }
    }
    dx
}

impl ImageEncoder {
    pub fn new(config: ImageEncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut stages = Vec::new();
        let mut c_in = config.in_channels;
        for (i, &c_out) in config.channels.iter().enumerate() {
            let fan_in = (c_in * KERNEL * KERNEL) as f64;
            let scale = (2.0 / fan_in).sqrt();
            let weight = Array2::from_shape_fn((c_out, c_in * KERNEL * KERNEL), |_| {
                gaussian(rng) * scale
            });
            stages.push(ConvStage {
                weight: Param::new(format!("image.stage{i}.weight"), weight, true),
                bias: Param::new(format!("image.stage{i}.bias"), Array2::zeros((1, c_out)), false),
                c_in,
                c_out,
            });
            c_in = c_out;
        }
        ImageEncoder { config, stages }
    }

    /// Trunk feature dimension (channels of the last stage).
    pub fn out_dim(&self) -> usize {
        *self.config.channels.last().expect("at least one stage")
    }

    /// Forward pass for one [c, h, w] image; returns the pooled feature and
    /// the cache needed for backward.
    pub fn forward(&self, image: &Array3<f64>) -> (Array1<f64>, ImageTrunkCache) {
        let mut x = image.clone();
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (_, h, w) = x.dim();
            let (h2, w2) = (out_dim(h), out_dim(w));
            let col = im2col(&x, h2, w2);
            let mut pre = stage.weight.value.dot(&col);
            for (mut row, &b) in pre.outer_iter_mut().zip(stage.bias.value.row(0)) {
                row += b;
            }
            let post = pre.mapv(|v| v.max(0.0));
            x = post
                .into_shape_with_order((stage.c_out, h2, w2))
                .expect("conv output reshape");
            caches.push(StageCache {
                col,
                pre,
                in_shape: (h, w),
                out_shape: (h2, w2),
            });
        }
        let (c, h, w) = x.dim();
        let area = h * w;
        let mut feature = Array1::zeros(c);
        for ci in 0..c {
            let mut sum = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    sum += x[[ci, y, xx]];
                }
            }
            feature[ci] = sum / area as f64;
        }
        (
            feature,
            ImageTrunkCache {
                stages: caches,
                pool_area: area,
                out_channels: c,
            },
        )
    }

    /// Backward from d(loss)/d(feature); accumulates parameter gradients.
    pub fn backward(&self, cache: &ImageTrunkCache, d_feature: &Array1<f64>, grads: &mut GradStore) {
        let last = cache.stages.last().expect("cache has stages");
        let (h2, w2) = last.out_shape;
        let area = cache.pool_area as f64;
        // d(pool)/d(x) spreads the feature gradient uniformly.
        let mut dy = Array2::zeros((cache.out_channels, h2 * w2));
        for ci in 0..cache.out_channels {
            let g = d_feature[ci] / area;
            for n in 0..h2 * w2 {
                dy[[ci, n]] = g;
            }
        }
        for (stage, sc) in self.stages.iter().zip(cache.stages.iter()).rev() {
            // ReLU gate.
            let mut d_pre = dy;
            for (dv, pv) in d_pre.iter_mut().zip(sc.pre.iter()) {
                if *pv <= 0.0 {
                    *dv = 0.0;
                }
            }
            let d_weight = d_pre.dot(&sc.col.t());
            grads.add(&stage.weight.name, d_weight);
            let mut d_bias = Array2::zeros((1, stage.c_out));
            for (ci, row) in d_pre.outer_iter().enumerate() {
                d_bias[[0, ci]] = row.sum();
            }
            grads.add(&stage.bias.name, d_bias);
            let d_col = stage.weight.value.t().dot(&d_pre);
            let (h, w) = sc.in_shape;
            let (oh, ow) = sc.out_shape;
            let dx = col2im(&d_col, stage.c_in, h, w, oh, ow);
            dy = dx
                .into_shape_with_order((stage.c_in, h * w))
                .expect("col2im reshape");
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            out.push(&mut stage.weight);
            out.push(&mut stage.bias);
        }
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for stage in &self.stages {
            out.push(&stage.weight);
            out.push(&stage.bias);
        }
        out
    }
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_encoder() -> ImageEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        ImageEncoder::new(
            ImageEncoderConfig {
                in_channels: 1,
                channels: vec![2, 3],
            },
            &mut rng,
        )
    }

    #[test]
    fn output_spatial_dims_halve_per_stage() {
        let enc = tiny_encoder();
        let img = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| (y * 8 + x) as f64 / 64.0);
        let (feat, cache) = enc.forward(&img);
        assert_eq!(feat.len(), 3);
        assert_eq!(cache.stages[0].out_shape, (4, 4));
        assert_eq!(cache.stages[1].out_shape, (2, 2));
    }

    #[test]
    fn degenerate_one_pixel_image_still_works() {
        let enc = tiny_encoder();
        let img = Array3::from_elem((1, 1, 1), 0.5);
        let (feat, _) = enc.forward(&img);
        assert_eq!(feat.len(), 3);
        assert!(feat.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn trunk_gradients_match_finite_differences() {
        let mut enc = tiny_encoder();
        let img = Array3::from_shape_fn((1, 6, 6), |(_, y, x)| {
            ((y * 7 + x * 3) as f64).sin() * 0.5
        });
        // Scalar objective: dot the pooled feature with a fixed probe.
        let probe = Array1::from_vec(vec![0.7, -0.3, 0.5]);
        let (_, cache) = enc.forward(&img);
        let mut grads = GradStore::new();
        enc.backward(&cache, &probe, &mut grads);

        let h = 1e-6;
        for stage in 0..2 {
            let name = format!("image.stage{stage}.weight");
            let g = grads.get(&name).unwrap().clone();
            // Spot-check a few entries.
            for &(r, c) in &[(0usize, 0usize), (1, 3), (0, 5)] {
                if r >= g.nrows() || c >= g.ncols() {
                    continue;
                }
                let orig = {
                    let params = enc.params_mut();
                    let p = params
                        .into_iter()
                        .find(|p| p.name == name)
                        .unwrap();
                    let orig = p.value[[r, c]];
                    p.value[[r, c]] = orig + h;
                    orig
                };
                let (f_plus, _) = enc.forward(&img);
                {
                    let params = enc.params_mut();
                    let p = params.into_iter().find(|p| p.name == name).unwrap();
                    p.value[[r, c]] = orig - h;
                }
                let (f_minus, _) = enc.forward(&img);
                {
                    let params = enc.params_mut();
                    let p = params.into_iter().find(|p| p.name == name).unwrap();
                    p.value[[r, c]] = orig;
                }
                let fd = (f_plus.dot(&probe) - f_minus.dot(&probe)) / (2.0 * h);
                assert!(
                    (fd - g[[r, c]]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "stage {stage} [{r},{c}]: fd {fd} vs analytic {}",
                    g[[r, c]]
                );
            }
        }
    }
}
