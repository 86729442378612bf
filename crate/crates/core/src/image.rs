//! RGB images with real-valued pixels in `[0, 1]`, stored channel-planar.

use std::path::Path;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io { path: String, source: image::ImageError },
    #[error("{path}: expected {expected_w}x{expected_h}, got {w}x{h}")]
    Size { path: String, expected_w: usize, expected_h: usize, w: usize, h: usize },
}

/// `H×W×3` image; `data[c * H * W + y * W + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; 3 * width * height] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), 3 * width * height);
        Self { width, height, data }
    }

    /// Uniform noise in `[lo, hi]`.
    pub fn noise<R: Rng>(width: usize, height: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..3 * width * height).map(|_| rng.random_range(lo..=hi)).collect();
        Self { width, height, data }
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn idx(&self, c: usize, x: usize, y: usize) -> usize {
        c * self.width * self.height + y * self.width + x
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[self.idx(c, x, y)]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        let i = self.idx(c, x, y);
        self.data[i] = v;
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Circular shift by `(dx, dy)` pixels: output `(x, y)` reads input `(x - dx, y - dy)`.
    pub fn roll(&self, dx: i64, dy: i64) -> Image {
        let (w, h) = (self.width as i64, self.height as i64);
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..h {
                let sy = (y - dy).rem_euclid(h);
                for x in 0..w {
                    let sx = (x - dx).rem_euclid(w);
                    out.data[self.idx(c, x as usize, y as usize)] = self.data[self.idx(c, sx as usize, sy as usize)];
                }
            }
        }
        out
    }

    /// Separable Gaussian blur with edge clamping; kernel radius `ceil(3 sigma)`.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let mut kernel: Vec<f64> = (-radius..=radius).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        let (w, h) = (self.width as i64, self.height as i64);
        let mut tmp = self.clone();
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, t) in (-radius..=radius).enumerate() {
                        let sx = (x + t).clamp(0, w - 1);
                        acc += kernel[k] * self.data[self.idx(c, sx as usize, y as usize)];
                    }
                    tmp.data[self.idx(c, x as usize, y as usize)] = acc;
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, t) in (-radius..=radius).enumerate() {
                        let sy = (y + t).clamp(0, h - 1);
                        acc += kernel[k] * tmp.data[self.idx(c, x as usize, sy as usize)];
                    }
                    out.data[self.idx(c, x as usize, y as usize)] = acc;
                }
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::filled(w, h, 0.0);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, x as usize, y as usize, p.0[c] as f64 / 255.0);
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        self.to_rgb8()
            .save(path)
            .map_err(|source| ImageError::Io { path: path.display().to_string(), source })
    }

    pub fn load_png(path: &Path) -> Result<Image, ImageError> {
        let img = image::open(path)
            .map_err(|source| ImageError::Io { path: path.display().to_string(), source })?
            .to_rgb8();
        Ok(Image::from_rgb8(&img))
    }

    pub fn load_png_sized(path: &Path, width: usize, height: usize) -> Result<Image, ImageError> {
        let img = Self::load_png(path)?;
        if img.width != width || img.height != height {
            return Err(ImageError::Size {
                path: path.display().to_string(),
                expected_w: width,
                expected_h: height,
                w: img.width,
                h: img.height,
            });
        }
        Ok(img)
    }
}
