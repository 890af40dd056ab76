//! Train-time and eval-time image transforms for the deep models.
//!
//! Every random decision comes from a stream keyed by
//! `(seed, "augment", epoch, sample index)`, so the transform of sample
//! `i` in epoch `e` is a pure function of `(seed, e, i)` no matter how
//! loading is parallelized.

use crate::dataset::{resize_bilinear, ImageRecord};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Element;

/// Crop geometry, flip probability and normalization constants.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub crop_size: usize,
    /// Sampled crop area as a fraction of the input area.
    pub scale_range: (f64, f64),
    /// Sampled width/height ratio of the crop rectangle.
    pub aspect_range: (f64, f64),
    pub flip_prob: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_size: 24,
            scale_range: (0.08, 1.0),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Argument(format!(
                "flip_prob must be in [0, 1], got {}",
                self.flip_prob
            )));
        }
        if self.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Argument("std entries must be positive".into()));
        }
        if self.crop_size == 0 {
            return Err(Error::Argument("crop_size must be positive".into()));
        }
        Ok(())
    }
}

fn crop(img: &ImageRecord, y0: usize, x0: usize, ch: usize, cw: usize) -> ImageRecord {
    let c = img.channels;
    let mut pixels = Vec::with_capacity(ch * cw * c);
    for y in y0..y0 + ch {
        let row = &img.pixels[((y * img.width) + x0) * c..((y * img.width) + x0 + cw) * c];
        pixels.extend_from_slice(row);
    }
    ImageRecord {
        pixels,
        height: ch,
        width: cw,
        channels: c,
        label: img.label,
        path: img.path.clone(),
    }
}

/// Mirrors the image left-right.
pub fn hflip(img: &ImageRecord) -> ImageRecord {
    let c = img.channels;
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        for x in (0..img.width).rev() {
            let at = (y * img.width + x) * c;
            pixels.extend_from_slice(&img.pixels[at..at + c]);
        }
    }
    ImageRecord {
        pixels,
        ..img.clone()
    }
}

/// Flips with probability `flip_prob`, consuming one draw either way.
pub fn random_hflip(img: &ImageRecord, flip_prob: f64, rng: &mut RngStream) -> ImageRecord {
    if rng.uniform() < flip_prob {
        hflip(img)
    } else {
        img.clone()
    }
}

/// Samples an area fraction and aspect ratio, crops the matching
/// sub-rectangle, and resizes it to `crop_size` square. Falls back to a
/// center crop of the short side after ten failed draws.
pub fn random_resized_crop(
    img: &ImageRecord,
    cfg: &AugmentConfig,
    rng: &mut RngStream,
) -> ImageRecord {
    let (h, w) = (img.height, img.width);
    let area = (h * w) as f64;
    for _ in 0..10 {
        let scale = rng.uniform_in(cfg.scale_range.0, cfg.scale_range.1);
        let aspect = rng.uniform_in(cfg.aspect_range.0, cfg.aspect_range.1);
        let target = area * scale;
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let x0 = rng.below((w - cw + 1) as u64) as usize;
            let y0 = rng.below((h - ch + 1) as u64) as usize;
            let window = crop(img, y0, x0, ch, cw);
            return resize_bilinear(&window, cfg.crop_size, cfg.crop_size)
                .expect("crop_size validated positive");
        }
    }
    let side = h.min(w);
    let window = crop(img, (h - side) / 2, (w - side) / 2, side, side);
    resize_bilinear(&window, cfg.crop_size, cfg.crop_size).expect("crop_size validated positive")
}

/// Channel-planar RGB in [0, 1] (C x H x W order).
pub fn unit_rgb(img: &ImageRecord) -> Result<Vec<f64>> {
    if img.channels != 3 {
        return Err(Error::Shape(format!(
            "expected 3-channel RGB, got {} channels",
            img.channels
        )));
    }
    let plane = img.height * img.width;
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(out)
}

/// Per-channel standardization of planar RGB in [0, 1]:
/// `out_c = (in_c - mean_c) / std_c`.
pub fn normalize_channels<T: Element>(
    rgb_chw: &[f64],
    cfg: &AugmentConfig,
) -> Result<Vec<T>> {
    if rgb_chw.len() % 3 != 0 {
        return Err(Error::Shape(format!(
            "planar RGB length {} is not divisible by 3 channels",
            rgb_chw.len()
        )));
    }
    let plane = rgb_chw.len() / 3;
    let mut out = Vec::with_capacity(rgb_chw.len());
    for c in 0..3 {
        let (mean, std) = (cfg.mean[c], cfg.std[c]);
        out.extend(
            rgb_chw[c * plane..(c + 1) * plane]
                .iter()
                .map(|v| T::from_f64((v - mean) / std)),
        );
    }
    Ok(out)
}

/// The full train-time transform: random resized crop, random horizontal
/// flip, [0, 1] scaling, normalization. Pure in `(seed, epoch, index)`.
pub fn train_transform<T: Element>(
    img: &ImageRecord,
    cfg: &AugmentConfig,
    seed: u64,
    epoch: u64,
    index: u64,
) -> Result<Vec<T>> {
    if img.channels != 3 {
        return Err(Error::Shape(format!(
            "deep pipeline expects RGB input, got {} channels for {}",
            img.channels, img.path
        )));
    }
    let mut rng = RngStream::derive(seed, "augment", epoch, index);
    let cropped = random_resized_crop(img, cfg, &mut rng);
    let flipped = random_hflip(&cropped, cfg.flip_prob, &mut rng);
    normalize_channels(&unit_rgb(&flipped)?, cfg)
}

/// The eval-time transform: resize the short side to 32 when needed, crop
/// the center `crop_size` square, scale and normalize. Deterministic.
pub fn eval_transform<T: Element>(img: &ImageRecord, cfg: &AugmentConfig) -> Result<Vec<T>> {
    if img.channels != 3 {
        return Err(Error::Shape(format!(
            "deep pipeline expects RGB input, got {} channels for {}",
            img.channels, img.path
        )));
    }
    let short = img.height.min(img.width);
    let resized;
    let img = if short == 32 {
        img
    } else {
        let scale = 32.0 / short as f64;
        let nh = ((img.height as f64 * scale).round() as usize).max(32);
        let nw = ((img.width as f64 * scale).round() as usize).max(32);
        resized = resize_bilinear(img, nh, nw)?;
        &resized
    };
    if img.height < cfg.crop_size || img.width < cfg.crop_size {
        return Err(Error::Dimension(format!(
            "image {}x{} is smaller than the {} center crop",
            img.height, img.width, cfg.crop_size
        )));
    }
    let y0 = (img.height - cfg.crop_size) / 2;
    let x0 = (img.width - cfg.crop_size) / 2;
    let window = crop(img, y0, x0, cfg.crop_size, cfg.crop_size);
    normalize_channels(&unit_rgb(&window)?, cfg)
}
