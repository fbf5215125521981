//! Dataset ingestion, preprocessing, synthetic data and mask persistence.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample;
use crate::seed::derive_seed;

/// H×W×3 image with values in `[0, 1]`.
pub type Image = Array3<f32>;
/// H×W binary mask holding only 0 and 1.
pub type Mask = Array2<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Background,
    Foreground,
}

impl ClassLabel {
    /// Index of the class score in the classifier head.
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Background => 0,
            ClassLabel::Foreground => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        match index {
            0 => Some(ClassLabel::Background),
            1 => Some(ClassLabel::Foreground),
            _ => None,
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            ClassLabel::Background => "background",
            ClassLabel::Foreground => "foreground",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Image,
    pub class_label: ClassLabel,
    pub gt_mask: Option<Mask>,
}

impl ImageSample {
    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.image.dim();
        (h, w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub split: Split,
    pub seed: u64,
    /// Ids of files that could not be decoded during loading.
    pub skipped: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>, split: Split, seed: u64) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self {
            samples,
            split,
            seed,
            skipped: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn count(&self, label: ClassLabel) -> usize {
        self.samples.iter().filter(|s| s.class_label == label).count()
    }

    pub fn has_both_classes(&self) -> bool {
        self.count(ClassLabel::Foreground) > 0 && self.count(ClassLabel::Background) > 0
    }

    /// Seeded shuffle followed by a cut at `train_fraction`. Each class is split
    /// separately so both halves keep the class balance.
    pub fn split(self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::InvalidArgument(format!(
                "train fraction {train_fraction} outside [0, 1]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for label in [ClassLabel::Foreground, ClassLabel::Background] {
            let mut group: Vec<ImageSample> = self
                .samples
                .iter()
                .filter(|s| s.class_label == label)
                .cloned()
                .collect();
            group.shuffle(&mut rng);
            let cut = (group.len() as f64 * train_fraction).round() as usize;
            test.extend(group.split_off(cut));
            train.extend(group);
        }
        train.sort_by(|a, b| a.id.cmp(&b.id));
        test.sort_by(|a, b| a.id.cmp(&b.id));
        Ok((
            Dataset::new(train, Split::Train, seed)?,
            Dataset::new(test, Split::Test, seed)?,
        ))
    }
}

/// Options for [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub size: (usize, usize),
    pub seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            size: (256, 256),
            seed: 0,
        }
    }
}

/// Loads `<root>/<split>/{foreground,background}/*.png` with optional masks in
/// `<root>/<split>/masks/<id>.png`. Sample order is a seeded shuffle of the
/// sorted file list.
pub fn load_dataset(root: &Path, split: Split, opts: &LoadOptions) -> Result<Dataset> {
    let dir = root.join(split.to_string());
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir));
    }
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for label in [ClassLabel::Foreground, ClassLabel::Background] {
        let class_dir = dir.join(label.dir_name());
        if !class_dir.is_dir() {
            continue;
        }
        for path in png_files(&class_dir)? {
            let id = file_id(&path);
            let raw = match image::open(&path) {
                Ok(img) => img.to_rgb8(),
                Err(e) => {
                    log::warn!("skipping unreadable image {}: {e}", path.display());
                    skipped.push(id);
                    continue;
                }
            };
            let image = resize_image(&rgb_to_array(&raw), opts.size)?;
            let mask_path = dir.join("masks").join(format!("{id}.png"));
            let gt_mask = if mask_path.is_file() {
                let mask = load_mask(&mask_path)?;
                if mask.dim() != (raw.height() as usize, raw.width() as usize) {
                    return Err(Error::MaskSizeMismatch { id });
                }
                Some(resize_mask(&mask, opts.size)?)
            } else {
                None
            };
            samples.push(ImageSample {
                id,
                image,
                class_label: label,
                gt_mask,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::NoSamples(dir));
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    log::info!(
        "loaded {} {split} samples ({} foreground, {} background, {} skipped) from {}",
        samples.len(),
        samples.iter().filter(|s| s.class_label == ClassLabel::Foreground).count(),
        samples.iter().filter(|s| s.class_label == ClassLabel::Background).count(),
        skipped.len(),
        dir.display()
    );
    let mut ds = Dataset::new(samples, split, opts.seed)?;
    ds.skipped = skipped;
    Ok(ds)
}

/// Writes a dataset in the layout read by [`load_dataset`].
pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    let dir = root.join(dataset.split.to_string());
    for label in [ClassLabel::Foreground, ClassLabel::Background] {
        let d = dir.join(label.dir_name());
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let masks = dir.join("masks");
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    for s in &dataset.samples {
        save_image(&s.image, &dir.join(s.class_label.dir_name()).join(format!("{}.png", s.id)))?;
        if let Some(m) = &s.gt_mask {
            save_mask(m, &masks.join(format!("{}.png", s.id)))?;
        }
    }
    Ok(())
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn rgb_to_array(img: &RgbImage) -> Image {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

fn check_target((h, w): (usize, usize)) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be positive, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Bilinear resize with half-pixel centers; output clamped to `[0, 1]`.
pub fn resize_image(image: &Image, target: (usize, usize)) -> Result<Image> {
    check_target(target)?;
    let (h, w, c) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let mut out = Array3::zeros((target.0, target.1, c));
    for ch in 0..c {
        let plane = resample::bilinear(&image.index_axis(Axis(2), ch).to_owned(), target);
        out.index_axis_mut(Axis(2), ch)
            .assign(&plane.mapv(|v| v.clamp(0.0, 1.0)));
    }
    Ok(out)
}

/// Nearest-neighbour resize; keeps the mask binary.
pub fn resize_mask(mask: &Mask, target: (usize, usize)) -> Result<Mask> {
    check_target(target)?;
    if mask.is_empty() {
        return Err(Error::InvalidArgument("empty mask".into()));
    }
    Ok(resample::nearest(mask, target))
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] != 0 { 255 } else { 0 }])
    });
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(img.get_pixel(x as u32, y as u32)[0] >= 128)
    }))
}

/// Saves an image quantized to 8-bit RGB.
pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    let (h, w, _) = image.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::image(path, e))
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

/// Knobs for the synthetic scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Coarse control grid of the smooth background, per side.
    pub background_grid: usize,
    /// Standard deviation of the per-pixel sensor noise.
    pub pixel_noise: f32,
    /// Texture period range in pixels for foreground regions.
    pub texture_period: (f32, f32),
    /// Peak-to-peak contrast of the foreground texture.
    pub texture_contrast: f32,
    /// Side length range of each region as a fraction of the image side.
    pub region_extent: (f32, f32),
    /// Maximum number of regions per foreground image.
    pub max_regions: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            background_grid: 4,
            pixel_noise: 0.01,
            texture_period: (3.0, 6.0),
            texture_contrast: 0.6,
            region_extent: (0.2, 0.45),
            max_regions: 3,
        }
    }
}

/// Generates a deterministic two-class scene dataset. Even indices are
/// foreground scenes with 1 to `max_regions` textured regions over a smooth
/// background; odd indices are smooth background only.
pub fn synthesize_dataset(seed: u64, n: usize, size: (usize, usize)) -> Result<Dataset> {
    synthesize_dataset_with(seed, n, size, &SynthParams::default())
}

pub fn synthesize_dataset_with(
    seed: u64,
    n: usize,
    size: (usize, usize),
    params: &SynthParams,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    check_target(size)?;
    let samples = (0..n)
        .map(|i| {
            let label = if i % 2 == 0 {
                ClassLabel::Foreground
            } else {
                ClassLabel::Background
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let (image, mask) = synth_scene(&mut rng, size, label, params);
            ImageSample {
                id: format!("syn{i:05}"),
                image,
                class_label: label,
                gt_mask: Some(mask),
            }
        })
        .collect();
    Dataset::new(samples, Split::Train, seed)
}

fn synth_scene(
    rng: &mut ChaCha8Rng,
    (h, w): (usize, usize),
    label: ClassLabel,
    p: &SynthParams,
) -> (Image, Mask) {
    let grid = p.background_grid.max(2);
    let base: [f32; 3] = [rng.random_range(0.25..0.5), rng.random_range(0.3..0.55), rng.random_range(0.2..0.4)];
    let mut image = Array3::zeros((h, w, 3));
    for (c, &level) in base.iter().enumerate() {
        let coarse = Array2::from_shape_fn((grid, grid), |_| level + rng.random_range(-0.12f32..0.12));
        let plane = resample::bilinear(&coarse, (h, w));
        image.index_axis_mut(Axis(2), c).assign(&plane);
    }

    let mut mask = Array2::<u8>::zeros((h, w));
    if label == ClassLabel::Foreground {
        let regions = rng.random_range(1..=p.max_regions.max(1));
        for _ in 0..regions {
            paint_region(rng, &mut image, &mut mask, p);
        }
    }

    let noise = Normal::new(0.0f32, p.pixel_noise.max(0.0)).expect("finite std");
    image.mapv_inplace(|v| (v + noise.sample(rng)).clamp(0.0, 1.0));
    (image, mask)
}

/// Paints one rectangle or ellipse of block texture, resembling a patch of roofs.
fn paint_region(rng: &mut ChaCha8Rng, image: &mut Image, mask: &mut Mask, p: &SynthParams) {
    let (h, w) = mask.dim();
    let (lo, hi) = p.region_extent;
    let rh = ((rng.random_range(lo..hi) * h as f32) as usize).clamp(2, h);
    let rw = ((rng.random_range(lo..hi) * w as f32) as usize).clamp(2, w);
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    let ellipse = rng.random_bool(0.5);
    let period = rng.random_range(p.texture_period.0..p.texture_period.1);
    let phase: (f32, f32) = (rng.random_range(0.0..period), rng.random_range(0.0..period));
    let tint: [f32; 3] = [rng.random_range(0.45..0.6), rng.random_range(0.4..0.55), rng.random_range(0.4..0.55)];
    let amp = p.texture_contrast / 2.0;
    let (cy, cx) = (top as f32 + rh as f32 / 2.0, left as f32 + rw as f32 / 2.0);
    for y in top..top + rh {
        for x in left..left + rw {
            if ellipse {
                let dy = (y as f32 + 0.5 - cy) / (rh as f32 / 2.0);
                let dx = (x as f32 + 0.5 - cx) / (rw as f32 / 2.0);
                if dy * dy + dx * dx > 1.0 {
                    continue;
                }
            }
            let u = ((x as f32 + phase.0) / period).floor() as i64;
            let v = ((y as f32 + phase.1) / period).floor() as i64;
            let sign = if (u + v).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
            let jitter = rng.random_range(-0.08f32..0.08);
            for c in 0..3 {
                image[[y, x, c]] = tint[c] + sign * amp + jitter;
            }
            mask[[y, x]] = 1;
        }
    }
}
