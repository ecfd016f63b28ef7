//! Grayscale image buffer in [-1, 1] with PNG io, bilinear resize, and the
//! resize-then-pad preprocessing used before encoding.

use ndarray::Array3;

use crate::error::{Error, Result};

pub const BACKGROUND: f64 = -1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in [-1, 1].
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![BACKGROUND; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// [1, h, w] array for the image encoder.
    pub fn to_array(&self) -> Array3<f64> {
        Array3::from_shape_vec((1, self.height, self.width), self.data.clone())
            .expect("image buffer matches its dimensions")
    }

    pub fn clamp_values(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
    }
}

/// Read an 8-bit grayscale PNG and scale to [-1, 1].
pub fn read_png(path: &std::path::Path) -> Result<Image> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!(
            "{}: only 8-bit PNGs are supported",
            path.display()
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data: Vec<f64> = match info.color_type {
        png::ColorType::Grayscale => buf[..w * h]
            .iter()
            .map(|&p| p as f64 / 127.5 - 1.0)
            .collect(),
        png::ColorType::Rgb => buf[..w * h * 3]
            .chunks_exact(3)
            .map(|px| {
                let luma = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
                luma / 127.5 - 1.0
            })
            .collect(),
        other => {
            return Err(Error::Data(format!(
                "{}: unsupported PNG color type {other:?}",
                path.display()
            )))
        }
    };
    Ok(Image {
        height: h,
        width: w,
        data,
    })
}

/// Write as 8-bit grayscale PNG (values clamped to [-1, 1]).
pub fn write_png(image: &Image, path: &std::path::Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut encoder = png::Encoder::new(
        std::io::BufWriter::new(file),
        image.width as u32,
        image.height as u32,
    );
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let bytes: Vec<u8> = image
        .data
        .iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Bilinear resize. Returns a clone when dimensions already match so the
/// identity case is exact.
pub fn resize(image: &Image, new_h: usize, new_w: usize) -> Image {
    if image.height == new_h && image.width == new_w {
        return image.clone();
    }
    let mut out = Image::new(new_h, new_w);
    let sy = image.height as f64 / new_h as f64;
    let sx = image.width as f64 / new_w as f64;
    for y in 0..new_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, image.height as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..new_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, image.width as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            let wx = fx - x0 as f64;
            let top = image.get(y0, x0) * (1.0 - wx) + image.get(y0, x1) * wx;
            let bottom = image.get(y1, x0) * (1.0 - wx) + image.get(y1, x1) * wx;
            out.set(y, x, top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

/// Resize the longer side to `target`, keeping aspect, then pad the shorter
/// side symmetrically with background to a square.
pub fn resize_and_pad(image: &Image, target: usize) -> Image {
    if image.height == target && image.width == target {
        return image.clone();
    }
    let (h, w) = (image.height, image.width);
    let (new_h, new_w) = if h >= w {
        let new_w = ((w * target + h / 2) / h).max(1);
        (target, new_w)
    } else {
        let new_h = ((h * target + w / 2) / w).max(1);
        (new_h, target)
    };
    let resized = resize(image, new_h, new_w);
    if new_h == target && new_w == target {
        return resized;
    }
    let mut out = Image::new(target, target);
    let oy = (target - new_h) / 2;
    let ox = (target - new_w) / 2;
    for y in 0..new_h {
        for x in 0..new_w {
            out.set(oy + y, ox + x, resized.get(y, x));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> Image {
        let mut img = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                img.set(y, x, (y + x) as f64 / (h + w) as f64 * 2.0 - 1.0);
            }
        }
        img
    }

    #[test]
    fn png_roundtrip_is_exact_at_8bit_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = gradient(9, 13);
        write_png(&img, &path).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.height, 9);
        assert_eq!(back.width, 13);
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() <= 1.0 / 127.5 + 1e-9);
        }
    }

    #[test]
    fn resize_same_size_is_identity() {
        let img = gradient(8, 8);
        assert_eq!(resize(&img, 8, 8), img);
    }

    #[test]
    fn resize_and_pad_centers_non_square_input() {
        let img = {
            let mut i = Image::new(4, 8);
            for v in &mut i.data {
                *v = 1.0;
            }
            i
        };
        let out = resize_and_pad(&img, 8);
        assert_eq!(out.height, 8);
        assert_eq!(out.width, 8);
        // Top and bottom rows are padding.
        assert_eq!(out.get(0, 0), BACKGROUND);
        assert_eq!(out.get(7, 7), BACKGROUND);
        assert!(out.get(4, 4) > 0.9);
    }

    #[test]
    fn values_stay_in_range() {
        let img = gradient(10, 7);
        let out = resize_and_pad(&img, 16);
        assert!(out.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
