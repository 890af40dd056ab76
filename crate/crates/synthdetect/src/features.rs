//! HOG descriptors and standard-score normalization for the SVM pipeline.
//!
//! Defaults follow the classic Dalal-Triggs settings scaled to 32x32 input:
//! 8-pixel cells, 2x2-cell blocks at 1-cell stride, 9 unsigned orientation
//! bins. Pixels are taken on the raw [0, 255] scale.

use std::io::Write;

use crate::dataset::ImageRecord;
use crate::error::{Error, Result};

/// Block-normalization guard; also what an all-zero block divides by.
const BLOCK_NORM_EPS: f64 = 1e-6;

/// Variance floor used by [`scaler_fit`] for constant features.
pub const SCALER_STD_FLOOR: f64 = 1e-12;

/// HOG hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HogConfig {
    /// Cell side in pixels.
    pub cell_size: usize,
    /// Block side in cells.
    pub block_size: usize,
    /// Block stride in cells.
    pub block_stride: usize,
    /// Orientation bins.
    pub n_bins: usize,
    /// Signed (0-360) vs unsigned (0-180) orientations.
    pub signed: bool,
}

impl Default for HogConfig {
    fn default() -> Self {
        HogConfig {
            cell_size: 8,
            block_size: 2,
            block_stride: 1,
            n_bins: 9,
            signed: false,
        }
    }
}

impl HogConfig {
    fn validate(&self) -> Result<()> {
        if self.cell_size == 0 || self.block_size == 0 || self.block_stride == 0 {
            return Err(Error::Argument(
                "cell_size, block_size and block_stride must be positive".into(),
            ));
        }
        if self.n_bins < 2 {
            return Err(Error::Argument(format!(
                "n_bins must be at least 2, got {}",
                self.n_bins
            )));
        }
        Ok(())
    }

    /// Blocks along one axis of `len` pixels, or an error when the image
    /// does not divide into whole cells or is smaller than one block.
    fn blocks_along(&self, len: usize) -> Result<usize> {
        if len % self.cell_size != 0 {
            return Err(Error::Dimension(format!(
                "image side {len} is not divisible into {}-pixel cells",
                self.cell_size
            )));
        }
        let cells = len / self.cell_size;
        if cells < self.block_size {
            return Err(Error::Dimension(format!(
                "image side {len} holds {cells} cells, smaller than one {}-cell block",
                self.block_size
            )));
        }
        Ok((cells - self.block_size) / self.block_stride + 1)
    }

    /// Closed-form descriptor length for an `h x w` image.
    pub fn descriptor_dim(&self, h: usize, w: usize) -> Result<usize> {
        self.validate()?;
        let by = self.blocks_along(h)?;
        let bx = self.blocks_along(w)?;
        Ok(by * bx * self.block_size * self.block_size * self.n_bins)
    }
}

/// A dense real-valued descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureVector { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Gradient orientation histograms over cells, block-normalized and
/// concatenated row-major.
pub fn hog_extract(img: &ImageRecord, cfg: &HogConfig) -> Result<FeatureVector> {
    cfg.validate()?;
    if !img.is_grayscale() {
        return Err(Error::Argument(
            "hog_extract requires a single-channel image".into(),
        ));
    }
    let (h, w) = (img.height, img.width);
    let blocks_y = cfg.blocks_along(h)?;
    let blocks_x = cfg.blocks_along(w)?;
    let cells_y = h / cfg.cell_size;
    let cells_x = w / cfg.cell_size;

    // Per-cell orientation histograms from centered-difference gradients
    // with replicate borders and linear bin interpolation.
    let mut cell_hist = vec![0.0f64; cells_y * cells_x * cfg.n_bins];
    let range = if cfg.signed { 360.0 } else { 180.0 };
    let bin_width = range / cfg.n_bins as f64;
    let at = |y: usize, x: usize| f64::from(img.pixel(y, x, 0));
    for y in 0..h {
        for x in 0..w {
            let gx = at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1));
            let gy = at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut ang = gy.atan2(gx).to_degrees();
            if cfg.signed {
                if ang < 0.0 {
                    ang += 360.0;
                }
            } else {
                if ang < 0.0 {
                    ang += 180.0;
                }
                if ang >= 180.0 {
                    ang -= 180.0;
                }
            }
            let t = ang / bin_width - 0.5;
            let b0 = t.floor();
            let frac = t - b0;
            let lo = (b0 as isize).rem_euclid(cfg.n_bins as isize) as usize;
            let hi = (lo + 1) % cfg.n_bins;
            let cell = (y / cfg.cell_size) * cells_x + x / cfg.cell_size;
            cell_hist[cell * cfg.n_bins + lo] += mag * (1.0 - frac);
            cell_hist[cell * cfg.n_bins + hi] += mag * frac;
        }
    }

    // Overlapping blocks, each L2-normalized.
    let block_len = cfg.block_size * cfg.block_size * cfg.n_bins;
    let mut values = Vec::with_capacity(blocks_y * blocks_x * block_len);
    for by in 0..blocks_y {
        for bx in 0..blocks_x {
            let start = values.len();
            for cy in 0..cfg.block_size {
                for cx in 0..cfg.block_size {
                    let cell =
                        (by * cfg.block_stride + cy) * cells_x + bx * cfg.block_stride + cx;
                    values.extend_from_slice(
                        &cell_hist[cell * cfg.n_bins..(cell + 1) * cfg.n_bins],
                    );
                }
            }
            let norm = values[start..]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .hypot(BLOCK_NORM_EPS);
            for v in &mut values[start..] {
                *v /= norm;
            }
        }
    }
    Ok(FeatureVector::new(values))
}

/// Per-feature mean/deviation fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalerState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ScalerState {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-column mean and population standard deviation, clamped at
/// [`SCALER_STD_FLOOR`].
pub fn scaler_fit(rows: &[FeatureVector]) -> Result<ScalerState> {
    if rows.len() < 2 {
        return Err(Error::Argument(format!(
            "scaler_fit needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let dim = rows[0].dim();
    if rows.iter().any(|r| r.dim() != dim) {
        return Err(Error::Argument("scaler_fit rows have mixed dims".into()));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(&row.values) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = vec![0.0; dim];
    for row in rows {
        for (s, (v, m)) in std.iter_mut().zip(row.values.iter().zip(&mean)) {
            let d = v - m;
            *s += d * d;
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt().max(SCALER_STD_FLOOR);
    }
    Ok(ScalerState { mean, std })
}

/// Standard-score transform `(v - mean) / std`.
pub fn scaler_apply(state: &ScalerState, v: &FeatureVector) -> Result<FeatureVector> {
    if v.dim() != state.dim() {
        return Err(Error::Argument(format!(
            "feature dim {} does not match scaler dim {}",
            v.dim(),
            state.dim()
        )));
    }
    let values = v
        .values
        .iter()
        .zip(state.mean.iter().zip(&state.std))
        .map(|(x, (m, s))| (x - m) / s)
        .collect();
    Ok(FeatureVector::new(values))
}

/// Dumps rows as comma-separated reals behind a header naming the
/// descriptor dim and the HOG config that produced it.
pub fn write_features_csv<W: Write>(
    mut out: W,
    rows: &[FeatureVector],
    cfg: &HogConfig,
) -> std::io::Result<()> {
    let dim = rows.first().map(|r| r.dim()).unwrap_or(0);
    writeln!(
        out,
        "# dim={dim} cell={} block={} stride={} bins={} signed={}",
        cfg.cell_size, cfg.block_size, cfg.block_stride, cfg.n_bins, cfg.signed
    )?;
    for row in rows {
        let line: Vec<String> = row.values.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}
