//! Training-time augmentations: random resized crop, rotation, and
//! brightness/contrast/saturation jitter. All randomness comes from the
//! caller's seeded generator, so a (seed, image) pair fully determines the
//! output.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{resize, Image, BACKGROUND};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub crop_min_area_fraction: f64,
    pub max_rotation_degrees: f64,
    pub brightness_jitter: f64,
    pub contrast_jitter: f64,
    pub saturation_jitter: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            crop_min_area_fraction: 0.75,
            max_rotation_degrees: 15.0,
            brightness_jitter: 0.10,
            contrast_jitter: 0.20,
            saturation_jitter: 0.20,
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        AugmentationConfig {
            crop_min_area_fraction: 1.0,
            max_rotation_degrees: 0.0,
            brightness_jitter: 0.0,
            contrast_jitter: 0.0,
            saturation_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("crop_min_area_fraction", self.crop_min_area_fraction),
            ("brightness_jitter", self.brightness_jitter),
            ("contrast_jitter", self.contrast_jitter),
            ("saturation_jitter", self.saturation_jitter),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.max_rotation_degrees < 0.0 {
            return Err(Error::Config(format!(
                "max_rotation_degrees must be >= 0, got {}",
                self.max_rotation_degrees
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

/// Sample a crop rectangle with area >= min_area_fraction of the image and
/// aspect ratio jittered within [3/4, 4/3]. Exposed so tests can check the
/// area bound directly.
pub fn sample_crop_rect(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    min_area_fraction: f64,
) -> CropRect {
    let full = (height * width) as f64;
    let min_area = min_area_fraction * full;
    let area = rng.gen_range(min_area..=full);
    let aspect: f64 = rng.gen_range(0.75..(4.0 / 3.0));
    let mut w = ((area * aspect).sqrt().round() as usize).clamp(1, width);
    let mut h = ((area / aspect).sqrt().round() as usize).clamp(1, height);
    // Rounding and clamping can undershoot the bound; grow until it holds.
    while ((w * h) as f64) < min_area {
        if w < width {
            w += 1;
        } else if h < height {
            h += 1;
        } else {
            break;
        }
    }
    let y = if height > h { rng.gen_range(0..=height - h) } else { 0 };
    let x = if width > w { rng.gen_range(0..=width - w) } else { 0 };
    CropRect {
        y,
        x,
        height: h,
        width: w,
    }
}

fn crop(image: &Image, rect: CropRect) -> Image {
    let mut out = Image::new(rect.height, rect.width);
    for y in 0..rect.height {
        for x in 0..rect.width {
            out.set(y, x, image.get(rect.y + y, rect.x + x));
        }
    }
    out
}

/// Rotate about the center with bilinear sampling; out-of-frame samples take
/// the background value.
fn rotate(image: &Image, degrees: f64) -> Image {
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (image.height as f64 - 1.0) / 2.0;
    let cx = (image.width as f64 - 1.0) / 2.0;
    let mut out = Image::new(image.height, image.width);
    for y in 0..image.height {
        for x in 0..image.width {
            // Inverse map into the source frame.
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = cy + dy * cos - dx * sin;
            let sx = cx + dy * sin + dx * cos;
            out.set(y, x, bilinear(image, sy, sx));
        }
    }
    out
}

fn bilinear(image: &Image, y: f64, x: f64) -> f64 {
    if y < -0.5 || x < -0.5 || y > image.height as f64 - 0.5 || x > image.width as f64 - 0.5 {
        return BACKGROUND;
    }
    let y = y.clamp(0.0, image.height as f64 - 1.0);
    let x = x.clamp(0.0, image.width as f64 - 1.0);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(image.height - 1);
    let x1 = (x0 + 1).min(image.width - 1);
    let wy = y - y0 as f64;
    let wx = x - x0 as f64;
    let top = image.get(y0, x0) * (1.0 - wx) + image.get(y0, x1) * wx;
    let bottom = image.get(y1, x0) * (1.0 - wx) + image.get(y1, x1) * wx;
    top * (1.0 - wy) + bottom * wy
}

/// Apply crop -> resize -> rotate -> jitter. Output is `target` x `target`
/// with values clamped to [-1, 1]. An all-identity config reproduces the
/// plain resized image exactly.
pub fn augment(
    image: &Image,
    config: &AugmentationConfig,
    target: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    config.validate()?;
    let mut out = if config.crop_min_area_fraction >= 1.0 {
        image.clone()
    } else {
        let rect = sample_crop_rect(rng, image.height, image.width, config.crop_min_area_fraction);
        crop(image, rect)
    };
    out = resize(&out, target, target);
    if config.max_rotation_degrees > 0.0 {
        let angle = rng.gen_range(-config.max_rotation_degrees..=config.max_rotation_degrees);
        out = rotate(&out, angle);
    }
    // Jitters operate on [0, 1] intensities like the usual color transforms.
    let apply_jitter = config.brightness_jitter > 0.0 || config.contrast_jitter > 0.0;
    if apply_jitter {
        let bf = 1.0 + rng.gen_range(-config.brightness_jitter..=config.brightness_jitter);
        let cf = 1.0 + rng.gen_range(-config.contrast_jitter..=config.contrast_jitter);
        let mean = out.data.iter().map(|v| (v + 1.0) / 2.0).sum::<f64>() / out.data.len() as f64;
        for v in &mut out.data {
            let mut u = (*v + 1.0) / 2.0;
            u *= bf;
            u = mean + cf * (u - mean);
            *v = u * 2.0 - 1.0;
        }
    }
    // Saturation jitter is a no-op for single-channel data; the config field
    // is honored for interface compatibility.
    if config.saturation_jitter > 0.0 {
        let _ = rng.gen_range(-config.saturation_jitter..=config.saturation_jitter);
    }
    out.clamp_values();
    Ok(out)
}
