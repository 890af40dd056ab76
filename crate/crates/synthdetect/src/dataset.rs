//! CIFAKE corpus ingestion, pixel-level preprocessing, and deterministic
//! subsetting.
//!
//! The on-disk layout is four directories of 32x32 PNGs:
//! `train/FAKE`, `train/REAL`, `test/FAKE`, `test/REAL`. Records are always
//! returned in lexicographic path order so two ingest passes are identical
//! regardless of decode parallelism.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Class label: FAKE is the detection target (positive class) everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Fake,
    Real,
}

impl Label {
    /// Directory name in the CIFAKE layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Fake => "FAKE",
            Label::Real => "REAL",
        }
    }

    /// Binary target for sigmoid heads: FAKE = 1, REAL = 0.
    pub fn target(self) -> f64 {
        match self {
            Label::Fake => 1.0,
            Label::Real => 0.0,
        }
    }

    /// Class index for softmax heads; matches [`Label::target`].
    pub fn class_index(self) -> usize {
        match self {
            Label::Fake => 1,
            Label::Real => 0,
        }
    }

    /// SVM sign convention: FAKE = +1, REAL = -1.
    pub fn sign(self) -> f64 {
        match self {
            Label::Fake => 1.0,
            Label::Real => -1.0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// A decoded raster with its label and provenance path.
///
/// Pixels are 8-bit, row-major, channel-interleaved (`H x W x C`), with
/// `C` either 1 (grayscale) or 3 (RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub pixels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub label: Label,
    pub path: String,
}

impl ImageRecord {
    pub fn new(
        pixels: Vec<u8>,
        height: usize,
        width: usize,
        channels: usize,
        label: Label,
        path: impl Into<String>,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Dimension(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "pixel buffer has {} bytes, expected {}x{}x{} = {}",
                pixels.len(),
                height,
                width,
                channels,
                height * width * channels
            )));
        }
        Ok(ImageRecord {
            pixels,
            height,
            width,
            channels,
            label,
            path: path.into(),
        })
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn is_grayscale(&self) -> bool {
        self.channels == 1
    }
}

/// Per-(split, label) record counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train_fake: usize,
    pub train_real: usize,
    pub test_fake: usize,
    pub test_real: usize,
}

/// Train/test partition of the corpus.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

impl DatasetSplit {
    pub fn counts(&self) -> SplitCounts {
        let count = |recs: &[ImageRecord], label: Label| {
            recs.iter().filter(|r| r.label == label).count()
        };
        SplitCounts {
            train_fake: count(&self.train, Label::Fake),
            train_real: count(&self.train, Label::Real),
            test_fake: count(&self.test, Label::Fake),
            test_real: count(&self.test, Label::Real),
        }
    }

    /// Writes `path,label,split` lines for every record.
    pub fn write_manifest<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "path,label,split")?;
        for rec in &self.train {
            writeln!(out, "{},{},train", rec.path, rec.label)?;
        }
        for rec in &self.test {
            writeln!(out, "{},{},test", rec.path, rec.label)?;
        }
        Ok(())
    }
}

/// Side of the corpus expected at ingestion.
const INGEST_SIDE: usize = 32;

fn decode_png(path: &Path, label: Label) -> Result<ImageRecord> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != INGEST_SIDE || h != INGEST_SIDE {
        return Err(Error::Dimension(format!(
            "{} is {w}x{h}, ingestion requires {INGEST_SIDE}x{INGEST_SIDE}",
            path.display()
        )));
    }
    let grayscale = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 | image::ColorType::La16
    );
    let (pixels, channels) = if grayscale {
        (img.to_luma8().into_raw(), 1)
    } else {
        (img.to_rgb8().into_raw(), 3)
    };
    ImageRecord::new(
        pixels,
        h,
        w,
        channels,
        label,
        path.to_string_lossy().into_owned(),
    )
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|ext| ext.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

fn ingest_side(root: &Path, side: &str) -> Result<Vec<ImageRecord>> {
    let mut jobs = Vec::new();
    for label in [Label::Fake, Label::Real] {
        let dir = root.join(side).join(label.dir_name());
        for path in list_pngs(&dir)? {
            jobs.push((path, label));
        }
    }
    let mut records: Vec<ImageRecord> = jobs
        .par_iter()
        .map(|(path, label)| decode_png(path, *label))
        .collect::<Result<_>>()?;
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(records)
}

/// Decodes the four-directory CIFAKE tree into a [`DatasetSplit`].
///
/// Decoding runs in parallel but the result is ordered lexicographically by
/// path, so repeated passes are byte-identical.
pub fn ingest_cifake(root: impl AsRef<Path>) -> Result<DatasetSplit> {
    let root = root.as_ref();
    Ok(DatasetSplit {
        train: ingest_side(root, "train")?,
        test: ingest_side(root, "test")?,
    })
}

/// ITU-R 601 luminosity conversion; identity when already grayscale.
pub fn to_grayscale(img: &ImageRecord) -> ImageRecord {
    if img.is_grayscale() {
        return img.clone();
    }
    let mut pixels = Vec::with_capacity(img.height * img.width);
    for px in img.pixels.chunks_exact(3) {
        let y = 0.299 * f64::from(px[0]) + 0.587 * f64::from(px[1]) + 0.114 * f64::from(px[2]);
        pixels.push(y.round().clamp(0.0, 255.0) as u8);
    }
    ImageRecord {
        pixels,
        height: img.height,
        width: img.width,
        channels: 1,
        label: img.label,
        path: img.path.clone(),
    }
}

/// Bilinear resize with half-pixel-center sample mapping and edge clamping.
pub fn resize_bilinear(img: &ImageRecord, out_h: usize, out_w: usize) -> Result<ImageRecord> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let c = img.channels;
    let scale_y = img.height as f64 / out_h as f64;
    let scale_x = img.width as f64 / out_w as f64;
    let mut pixels = vec![0u8; out_h * out_w * c];
    for oy in 0..out_h {
        let sy = (oy as f64 + 0.5) * scale_y - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0i = (y0 as isize).clamp(0, img.height as isize - 1) as usize;
        let y1i = (y0 as isize + 1).clamp(0, img.height as isize - 1) as usize;
        for ox in 0..out_w {
            let sx = (ox as f64 + 0.5) * scale_x - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0i = (x0 as isize).clamp(0, img.width as isize - 1) as usize;
            let x1i = (x0 as isize + 1).clamp(0, img.width as isize - 1) as usize;
            for ch in 0..c {
                let p00 = f64::from(img.pixel(y0i, x0i, ch));
                let p01 = f64::from(img.pixel(y0i, x1i, ch));
                let p10 = f64::from(img.pixel(y1i, x0i, ch));
                let p11 = f64::from(img.pixel(y1i, x1i, ch));
                let top = p00 * (1.0 - fx) + p01 * fx;
                let bot = p10 * (1.0 - fx) + p11 * fx;
                let v = top * (1.0 - fy) + bot * fy;
                pixels[(oy * out_w + ox) * c + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(ImageRecord {
        pixels,
        height: out_h,
        width: out_w,
        channels: c,
        label: img.label,
        path: img.path.clone(),
    })
}

fn sample_per_class(
    records: &[ImageRecord],
    n_per_class: usize,
    stream: &mut RngStream,
) -> Result<Vec<ImageRecord>> {
    let fake: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].label == Label::Fake)
        .collect();
    let real: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].label == Label::Real)
        .collect();
    if n_per_class > fake.len() || n_per_class > real.len() {
        return Err(Error::Capacity {
            requested: n_per_class,
            available_fake: fake.len(),
            available_real: real.len(),
        });
    }
    let mut out = Vec::with_capacity(2 * n_per_class);
    for class_indices in [&fake, &real] {
        for i in stream.sample_indices(class_indices.len(), n_per_class) {
            out.push(records[class_indices[i]].clone());
        }
    }
    Ok(out)
}

/// Samples `n_per_class` records of each label, without replacement, from
/// both sides of the split. Identical `(seed, n)` yields identical subsets.
pub fn stratified_subset(
    split: &DatasetSplit,
    n_per_class: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    stratified_subset_sides(split, n_per_class, n_per_class, seed)
}

/// Like [`stratified_subset`] but with independent per-class counts for the
/// train and test sides (desk-scale runs typically shrink them differently).
pub fn stratified_subset_sides(
    split: &DatasetSplit,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    let mut train_stream = RngStream::derive(seed, "subset", 0, 0);
    let mut test_stream = RngStream::derive(seed, "subset", 1, 0);
    Ok(DatasetSplit {
        train: sample_per_class(&split.train, train_per_class, &mut train_stream)?,
        test: sample_per_class(&split.test, test_per_class, &mut test_stream)?,
    })
}

/// Two Gaussian-textured 32x32 RGB classes, generated deterministically from
/// the seed. FAKE images carry a bright-noise high-frequency texture over a
/// darker base; REAL images are smoother and brighter, so both pixel
/// statistics and gradient structure separate the classes.
pub fn synthetic_split(
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> DatasetSplit {
    let make_side = |side: &str, side_code: u64, n_per_class: usize| -> Vec<ImageRecord> {
        let mut records = Vec::with_capacity(2 * n_per_class);
        for (class_code, label) in [(0u64, Label::Fake), (1u64, Label::Real)] {
            for i in 0..n_per_class {
                let mut rng =
                    RngStream::derive(seed, "synthetic", side_code * 2 + class_code, i as u64);
                records.push(synthetic_image(label, side, i, &mut rng));
            }
        }
        records.sort_by(|a, b| a.path.cmp(&b.path));
        records
    };
    DatasetSplit {
        train: make_side("train", 0, train_per_class),
        test: make_side("test", 1, test_per_class),
    }
}

fn synthetic_image(label: Label, side: &str, index: usize, rng: &mut RngStream) -> ImageRecord {
    const SIDE: usize = INGEST_SIDE;
    let (base_mean, freq_lo, freq_hi) = match label {
        Label::Fake => (100.0, 1.5, 3.0),
        Label::Real => (150.0, 0.1, 0.4),
    };
    let base: [f64; 3] = [
        rng.normal(base_mean, 15.0),
        rng.normal(base_mean, 15.0),
        rng.normal(base_mean, 15.0),
    ];
    let fx = rng.uniform_in(freq_lo, freq_hi);
    let fy = rng.uniform_in(freq_lo, freq_hi);
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    let amp = 45.0;
    let mut pixels = Vec::with_capacity(SIDE * SIDE * 3);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let wave = amp * (fx * x as f64 + fy * y as f64 + phase).sin();
            for channel_base in base {
                let v = channel_base + wave + rng.normal(0.0, 25.0);
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageRecord {
        pixels,
        height: SIDE,
        width: SIDE,
        channels: 3,
        label,
        path: format!("synthetic://{side}/{}/{index:06}.png", label.dir_name()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(pixels: Vec<u8>, h: usize, w: usize) -> ImageRecord {
        ImageRecord::new(pixels, h, w, 1, Label::Real, "test://gray").unwrap()
    }

    fn rgb_pixel(r: u8, g: u8, b: u8) -> ImageRecord {
        ImageRecord::new(vec![r, g, b], 1, 1, 3, Label::Fake, "test://px").unwrap()
    }

    #[test]
    fn grayscale_of_gray_pixel_is_identity_value() {
        for v in [0u8, 17, 128, 255] {
            let out = to_grayscale(&rgb_pixel(v, v, v));
            assert_eq!(out.pixels, vec![v]);
        }
    }

    #[test]
    fn grayscale_of_pure_red_matches_hand_value() {
        // 0.299 * 255 = 76.245 -> 76
        let out = to_grayscale(&rgb_pixel(255, 0, 0));
        assert_eq!(out.pixels, vec![76]);
    }

    #[test]
    fn grayscale_of_black_is_zero() {
        let img = ImageRecord::new(vec![0; 4 * 4 * 3], 4, 4, 3, Label::Fake, "p").unwrap();
        let out = to_grayscale(&img);
        assert!(out.pixels.iter().all(|&v| v == 0));
        assert_eq!(out.channels, 1);
    }

    #[test]
    fn grayscale_is_idempotent() {
        let img = rgb_pixel(13, 200, 77);
        let once = to_grayscale(&img);
        let twice = to_grayscale(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn resize_to_own_dimensions_is_exact_identity() {
        let img = gray((0..16).map(|v| v * 13).collect(), 4, 4);
        let out = resize_bilinear(&img, 4, 4).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn resize_of_constant_image_stays_constant() {
        let img = gray(vec![91; 9], 3, 3);
        for (h, w) in [(1, 1), (2, 5), (7, 7), (12, 3)] {
            let out = resize_bilinear(&img, h, w).unwrap();
            assert!(out.pixels.iter().all(|&v| v == 91), "{h}x{w}");
        }
    }

    #[test]
    fn resize_2x2_to_4x4_matches_hand_computed_grid() {
        let img = gray(vec![0, 100, 100, 200], 2, 2);
        let out = resize_bilinear(&img, 4, 4).unwrap();
        // Half-pixel centers with edge clamping, worked out by hand.
        #[rustfmt::skip]
        let expected: Vec<u8> = vec![
              0,  25,  75, 100,
             25,  50, 100, 125,
             75, 100, 150, 175,
            100, 125, 175, 200,
        ];
        assert_eq!(out.pixels, expected);
    }

    #[test]
    fn resize_rejects_zero_target() {
        let img = gray(vec![0; 4], 2, 2);
        assert!(matches!(
            resize_bilinear(&img, 0, 4),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn stratified_subset_is_balanced_and_deterministic() {
        let split = synthetic_split(120, 120, 99);
        let a = stratified_subset(&split, 100, 7).unwrap();
        let b = stratified_subset(&split, 100, 7).unwrap();
        let counts = a.counts();
        assert_eq!(counts.train_fake, 100);
        assert_eq!(counts.train_real, 100);
        let paths = |s: &DatasetSplit| {
            s.train
                .iter()
                .map(|r| r.path.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(paths(&a), paths(&b));
    }

    #[test]
    fn stratified_subset_differs_across_seeds_with_same_balance() {
        let split = synthetic_split(120, 120, 99);
        let a = stratified_subset(&split, 100, 7).unwrap();
        let b = stratified_subset(&split, 100, 8).unwrap();
        assert_ne!(
            a.train.iter().map(|r| &r.path).collect::<Vec<_>>(),
            b.train.iter().map(|r| &r.path).collect::<Vec<_>>()
        );
        assert_eq!(a.counts(), b.counts());
    }

    #[test]
    fn stratified_subset_full_count_is_permutation() {
        let split = synthetic_split(25, 25, 3);
        let sub = stratified_subset(&split, 25, 11).unwrap();
        let mut orig: Vec<&str> = split.train.iter().map(|r| r.path.as_str()).collect();
        let mut got: Vec<&str> = sub.train.iter().map(|r| r.path.as_str()).collect();
        orig.sort_unstable();
        got.sort_unstable();
        assert_eq!(orig, got);
    }

    #[test]
    fn stratified_subset_overflow_is_capacity_error() {
        let split = synthetic_split(10, 5, 3);
        match stratified_subset(&split, 11, 0) {
            Err(Error::Capacity {
                requested,
                available_fake,
                available_real,
            }) => {
                assert_eq!(requested, 11);
                assert_eq!(available_fake, 10);
                assert_eq!(available_real, 10);
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_split_is_deterministic_and_labeled() {
        let a = synthetic_split(6, 3, 17);
        let b = synthetic_split(6, 3, 17);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let counts = a.counts();
        assert_eq!(
            (counts.train_fake, counts.train_real, counts.test_fake, counts.test_real),
            (6, 6, 3, 3)
        );
        // Train and test are disjoint by path.
        for tr in &a.train {
            assert!(a.test.iter().all(|te| te.path != tr.path));
        }
    }

    #[test]
    fn manifest_lists_every_record() {
        let split = synthetic_split(2, 1, 5);
        let mut buf = Vec::new();
        split.write_manifest(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path,label,split");
        assert_eq!(lines.len(), 1 + 4 + 2);
        assert!(lines[1].ends_with(",FAKE,train"));
        assert!(lines.last().unwrap().ends_with(",REAL,test"));
    }
}
