//! Seeded synthetic datasets.
//!
//! Patch-level: class-conditional textures (base tint, nucleus density and
//! size, stripe orientation) rendered at `size·render_scale` and
//! box-downsampled to `size`.
//!
//! Slide-level: a near-white background with one irregular pink tissue blob.
//! Positive slides carry `max(1, round(prevalence·N))` tumor cells (whole
//! grid cells inside the blob, darker tint, dense large nuclei), where `N`
//! is the number of grid cells at least half covered by the blob.

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use efcm_tensor::derive_seed;

use super::image::{load_raster, save_raster, RasterFormat, RgbImage};
use super::preprocess::channel_means;
use super::segment::{extract_patches, tissue_segment, Mask, PatchCoord, SegmentConfig};
use crate::error::{config, CoreError, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { val: 0.2, test: 0.2 }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        if self.val < 0.0 || self.test < 0.0 || self.val + self.test >= 1.0 {
            return Err(config(format!("split fractions val {} + test {} must be < 1", self.val, self.test)));
        }
        Ok(())
    }

    /// Stratified assignment: each class is shuffled and cut into
    /// test / val / train.
    fn assign(&self, labels: &[usize], seed: u64) -> Vec<String> {
        let mut out = vec![String::new(); labels.len()];
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        for (class, mut idx) in by_class {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5B17 + class as u64)));
            let n = idx.len();
            let n_test = (self.test * n as f64).round() as usize;
            let n_val = (self.val * n as f64).round() as usize;
            for (rank, i) in idx.into_iter().enumerate() {
                out[i] = if rank < n_test {
                    "test"
                } else if rank < n_test + n_val {
                    "val"
                } else {
                    "train"
                }
                .to_string();
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TissueStyle {
    base: [f32; 3],
    nucleus: [f32; 3],
    /// Render pixels per nucleus.
    area_per_nucleus: f32,
    radius: (f32, f32),
    /// `(angle, period, amplitude)` of a luminance stripe pattern.
    stripes: Option<(f32, f32, f32)>,
}

const NORMAL: TissueStyle = TissueStyle {
    base: [0.93, 0.70, 0.83],
    nucleus: [0.50, 0.30, 0.65],
    area_per_nucleus: 1600.0,
    radius: (3.0, 6.0),
    stripes: None,
};

const TUMOR: TissueStyle = TissueStyle {
    base: [0.70, 0.42, 0.68],
    nucleus: [0.28, 0.10, 0.42],
    area_per_nucleus: 260.0,
    radius: (5.0, 9.0),
    stripes: None,
};

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
}

fn class_style(class: usize, num_classes: usize) -> TissueStyle {
    let t = if num_classes > 1 { class as f32 / (num_classes - 1) as f32 } else { 0.0 };
    TissueStyle {
        base: lerp3(NORMAL.base, TUMOR.base, t),
        nucleus: lerp3(NORMAL.nucleus, TUMOR.nucleus, t),
        area_per_nucleus: NORMAL.area_per_nucleus + t * (TUMOR.area_per_nucleus - NORMAL.area_per_nucleus),
        radius: (3.0 + 2.0 * t, 6.0 + 3.0 * t),
        stripes: Some((PI * class as f32 / num_classes as f32, 48.0, 0.08)),
    }
}

/// Paint `style` over the `w×h` rectangle at `(x0, y0)` wherever `inside`
/// holds.
fn paint(
    img: &mut RgbImage,
    (x0, y0, w, h): (usize, usize, usize, usize),
    style: &TissueStyle,
    inside: impl Fn(usize, usize) -> bool,
    rng: &mut ChaCha8Rng,
) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            if !inside(x, y) {
                continue;
            }
            let mut shade = 1.0 + rng.random_range(-0.04f32..0.04);
            if let Some((angle, period, amp)) = style.stripes {
                let u = x as f32 * angle.cos() + y as f32 * angle.sin();
                shade += amp * (2.0 * PI * u / period).sin();
            }
            img.set(x, y, style.base.map(|c| (c * shade).clamp(0.0, 1.0)));
        }
    }
    let count = ((w * h) as f32 / style.area_per_nucleus).round() as usize;
    for _ in 0..count {
        let cx = x0 as f32 + rng.random_range(0.0..w as f32);
        let cy = y0 as f32 + rng.random_range(0.0..h as f32);
        let r = rng.random_range(style.radius.0..style.radius.1);
        let tone = 1.0 + rng.random_range(-0.1f32..0.1);
        let color = style.nucleus.map(|c| (c * tone).clamp(0.0, 1.0));
        let xa = (cx - r).floor().max(x0 as f32) as usize;
        let xb = ((cx + r).ceil() as usize).min(x0 + w - 1);
        let ya = (cy - r).floor().max(y0 as f32) as usize;
        let yb = ((cy + r).ceil() as usize).min(y0 + h - 1);
        for y in ya..=yb {
            for x in xa..=xb {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r && inside(x, y) {
                    img.set(x, y, color);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSynthConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub size: usize,
    pub render_scale: usize,
    pub splits: SplitFractions,
    pub format: RasterFormat,
}

impl Default for PatchSynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            samples_per_class: 500,
            size: 32,
            render_scale: 8,
            splits: SplitFractions::default(),
            format: RasterFormat::Png,
        }
    }
}

impl PatchSynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config("patch datasets need at least 2 classes"));
        }
        if self.samples_per_class == 0 || self.size == 0 || self.render_scale == 0 {
            return Err(config("samples per class, size and render scale must be ≥ 1"));
        }
        self.splits.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Patch,
    Slide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub label: usize,
    pub split: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePatch {
    #[serde(flatten)]
    pub coord: PatchCoord,
    pub tumor: bool,
    /// Sample id of the patch raster.
    pub sample: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub id: String,
    pub label: usize,
    pub split: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    /// `(row, col)` grid cells painted with the tumor pattern.
    pub tumor_cells: Vec<(usize, usize)>,
    pub patches: Vec<SlidePatch>,
    /// Fraction of the generated blob found by segmentation.
    pub tissue_recall: f64,
    /// Fraction of the background marked as tissue.
    pub background_fp: f64,
    pub thumbnail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: DatasetKind,
    pub seed: u64,
    pub config: serde_json::Value,
    pub channel_means: [f64; 3],
    pub raster_format: RasterFormat,
    pub num_classes: usize,
    pub samples: Vec<SampleEntry>,
    #[serde(default)]
    pub slides: Vec<SlideRecord>,
}

impl Manifest {
    /// `(split, label) → count` over samples.
    pub fn sample_counts(&self) -> BTreeMap<(String, usize), usize> {
        let mut m = BTreeMap::new();
        for s in &self.samples {
            *m.entry((s.split.clone(), s.label)).or_insert(0) += 1;
        }
        m
    }

    pub fn slide_label_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for s in &self.slides {
            *m.entry(s.label).or_insert(0) += 1;
        }
        m
    }
}

/// In-memory dataset: manifest plus the patch rasters in sample order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<RgbImage>,
    pub thumbnails: Vec<RgbImage>,
}

impl Dataset {
    pub fn sample_index(&self) -> BTreeMap<&str, usize> {
        self.manifest.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect()
    }

    /// Indices of samples in `split`.
    pub fn split_indices(&self, split: &str) -> Vec<usize> {
        (0..self.manifest.samples.len())
            .filter(|&i| self.manifest.samples[i].split == split)
            .collect()
    }

    /// Write rasters under `dir/rasters/` and `dir/manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let rasters = dir.join("rasters");
        std::fs::create_dir_all(&rasters)?;
        let fmt = self.manifest.raster_format;
        for (s, img) in self.manifest.samples.iter().zip(&self.images) {
            let stem = s.file.rsplit_once('.').map_or(s.file.as_str(), |(a, _)| a);
            save_raster(img, &rasters, stem, fmt)?;
        }
        for (slide, thumb) in self.manifest.slides.iter().zip(&self.thumbnails) {
            if let Some(f) = &slide.thumbnail {
                let stem = f.rsplit_once('.').map_or(f.as_str(), |(a, _)| a);
                save_raster(thumb, &rasters, stem, fmt)?;
            }
        }
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(CoreError::Contract(format!("unsupported manifest version {}", manifest.version)));
        }
        let rasters = dir.join("rasters");
        let images = manifest
            .samples
            .iter()
            .map(|s| load_raster(&rasters.join(&s.file)))
            .collect::<Result<Vec<_>>>()?;
        let thumbnails = manifest
            .slides
            .iter()
            .filter_map(|s| s.thumbnail.as_ref())
            .map(|f| load_raster(&rasters.join(f)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest,
            images,
            thumbnails,
        })
    }
}

fn raster_file(id: &str, fmt: RasterFormat) -> String {
    let stem = id.replace('/', "_");
    match fmt {
        RasterFormat::Png => format!("{stem}.png"),
        RasterFormat::Raw => format!("{stem}.json"),
    }
}

fn stored(img: RgbImage, fmt: RasterFormat) -> RgbImage {
    match fmt {
        RasterFormat::Png => img.quantized(),
        RasterFormat::Raw => img,
    }
}

pub fn render_patch(class: usize, num_classes: usize, size: usize, render_scale: usize, seed: u64) -> Result<RgbImage> {
    let s = size * render_scale;
    let mut img = RgbImage::filled(s, s, [1.0; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut style = class_style(class, num_classes);
    if let Some((angle, period, amp)) = style.stripes {
        let jitter = rng.random_range(-0.15f32..0.15);
        style.stripes = Some((angle + jitter, period * render_scale as f32 / 8.0, amp));
    }
    paint(&mut img, (0, 0, s, s), &style, |_, _| true, &mut rng);
    img.box_downsample(render_scale)
}

pub fn synth_patches(cfg: &PatchSynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.num_classes * cfg.samples_per_class;
    let labels: Vec<usize> = (0..n).map(|i| i / cfg.samples_per_class).collect();
    let splits = cfg.splits.assign(&labels, seed);
    let root = derive_seed(seed, 0x9A7C);
    let images = (0..n)
        .into_par_iter()
        .map(|i| render_patch(labels[i], cfg.num_classes, cfg.size, cfg.render_scale, derive_seed(root, i as u64)))
        .map(|r| r.map(|img| stored(img, cfg.format)))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<SampleEntry> = (0..n)
        .map(|i| {
            let id = format!("patch_{i:05}");
            SampleEntry {
                file: raster_file(&id, cfg.format),
                id,
                label: labels[i],
                split: splits[i].clone(),
            }
        })
        .collect();
    let train: Vec<&RgbImage> = samples.iter().zip(&images).filter(|(s, _)| s.split == "train").map(|(_, i)| i).collect();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        kind: DatasetKind::Patch,
        seed,
        config: serde_json::to_value(cfg)?,
        channel_means: channel_means(train)?,
        raster_format: cfg.format,
        num_classes: cfg.num_classes,
        samples,
        slides: vec![],
    };
    Ok(Dataset {
        manifest,
        images,
        thumbnails: vec![],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlideSynthConfig {
    pub positives: usize,
    pub negatives: usize,
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    /// Side of the stored patch rasters (box-downsampled from `patch_size`).
    pub patch_out: usize,
    pub tumor_prevalence: f64,
    pub splits: SplitFractions,
    pub segment: SegmentConfig,
    pub format: RasterFormat,
    pub thumbnails: bool,
}

impl Default for SlideSynthConfig {
    fn default() -> Self {
        Self {
            positives: 100,
            negatives: 100,
            width: 1536,
            height: 1536,
            patch_size: 256,
            patch_out: 32,
            tumor_prevalence: 0.1,
            splits: SplitFractions::default(),
            segment: SegmentConfig::default(),
            format: RasterFormat::Png,
            thumbnails: false,
        }
    }
}

impl SlideSynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.positives == 0 && self.negatives == 0 {
            return Err(config("no slides requested"));
        }
        let p = self.patch_size;
        if p == 0 || !self.width.is_multiple_of(p) || !self.height.is_multiple_of(p) || self.width < 3 * p || self.height < 3 * p {
            return Err(config(format!(
                "slide {}×{} must be a multiple of the patch size {p} and at least 3 patches wide",
                self.width, self.height
            )));
        }
        if self.patch_out == 0 || !p.is_multiple_of(self.patch_out) {
            return Err(config(format!("patch size {p} must be a multiple of the output size {}", self.patch_out)));
        }
        if !(self.tumor_prevalence > 0.0 && self.tumor_prevalence <= 1.0) {
            return Err(config(format!("tumor prevalence {} outside (0, 1]", self.tumor_prevalence)));
        }
        self.splits.validate()
    }
}

/// Irregular ellipse: radius modulated by two low harmonics of the angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cx: f32,
    pub cy: f32,
    pub rx: f32,
    pub ry: f32,
    pub wobble: [f32; 4],
}

impl Blob {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        let t = dy.atan2(dx);
        let w = &self.wobble;
        let scale = 1.0 + w[0] * (2.0 * t + w[1]).sin() + w[2] * (3.0 * t + w[3]).sin();
        (dx * dx + dy * dy).sqrt() <= scale
    }

    fn mask(&self, width: usize, height: usize) -> Mask {
        let data = (0..width * height)
            .map(|i| self.contains((i % width) as f32 + 0.5, (i / width) as f32 + 0.5))
            .collect();
        Mask { width, height, data }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    pub id: String,
    pub label: usize,
    pub seed: u64,
    pub image: RgbImage,
    pub blob: Blob,
    pub tissue: Mask,
    pub tumor_cells: Vec<(usize, usize)>,
}

pub fn generate_slide(cfg: &SlideSynthConfig, id: &str, label: usize, seed: u64) -> Result<SyntheticSlide> {
    cfg.validate()?;
    let (w, h, p) = (cfg.width, cfg.height, cfg.patch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blob = Blob {
        cx: w as f32 * rng.random_range(0.45..0.55),
        cy: h as f32 * rng.random_range(0.45..0.55),
        rx: w as f32 * rng.random_range(0.36..0.42),
        ry: h as f32 * rng.random_range(0.36..0.42),
        wobble: [
            rng.random_range(0.0..0.06),
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..0.04),
            rng.random_range(0.0..2.0 * PI),
        ],
    };
    let tissue = blob.mask(w, h);
    let mut image = RgbImage::filled(w, h, [0.0; 3]);
    for px in image.data.chunks_exact_mut(3) {
        let v = rng.random_range(0.955f32..0.995);
        px.copy_from_slice(&[v, v, v]);
    }
    paint(&mut image, (0, 0, w, h), &NORMAL, |x, y| tissue.get(x, y), &mut rng);

    let mut tumor_cells = Vec::new();
    if label == 1 {
        let area = (p * p) as f64;
        let mut candidates = Vec::new();
        let mut half_covered = 0usize;
        for r in 0..h / p {
            for c in 0..w / p {
                let cov = tissue.count_in(c * p, r * p, p) as f64 / area;
                if cov >= 0.5 {
                    half_covered += 1;
                }
                if cov >= 1.0 {
                    candidates.push((r, c));
                }
            }
        }
        if candidates.is_empty() {
            return Err(CoreError::Contract(format!("{id}: tissue blob contains no whole grid cell")));
        }
        let n = ((cfg.tumor_prevalence * half_covered as f64).round() as usize).clamp(1, candidates.len());
        candidates.shuffle(&mut rng);
        tumor_cells = candidates[..n].to_vec();
        tumor_cells.sort_unstable();
        for &(r, c) in &tumor_cells {
            paint(&mut image, (c * p, r * p, p, p), &TUMOR, |_, _| true, &mut rng);
        }
    }
    Ok(SyntheticSlide {
        id: id.to_string(),
        label,
        seed,
        image,
        blob,
        tissue,
        tumor_cells,
    })
}

struct ProcessedSlide {
    record: SlideRecord,
    patches: Vec<RgbImage>,
    thumbnail: Option<RgbImage>,
}

fn process_slide(cfg: &SlideSynthConfig, slide: &SyntheticSlide, split: &str) -> Result<ProcessedSlide> {
    let mask = tissue_segment(&slide.image, &cfg.segment);
    let (mut hit, mut fp) = (0usize, 0usize);
    for (&m, &t) in mask.data.iter().zip(&slide.tissue.data) {
        match (m, t) {
            (true, true) => hit += 1,
            (true, false) => fp += 1,
            _ => {}
        }
    }
    let blob_area = slide.tissue.count().max(1);
    let bg_area = (slide.tissue.data.len() - slide.tissue.count()).max(1);
    let coords = extract_patches(&mask, cfg.patch_size)?;
    let factor = cfg.patch_size / cfg.patch_out;
    let mut patches = Vec::with_capacity(coords.len());
    let mut records = Vec::with_capacity(coords.len());
    for (i, c) in coords.into_iter().enumerate() {
        let img = slide.image.crop(c.x, c.y, c.size, c.size)?.box_downsample(factor)?;
        patches.push(stored(img, cfg.format));
        records.push(SlidePatch {
            tumor: slide.tumor_cells.contains(&c.grid_cell()),
            coord: c,
            sample: format!("{}/p{i:03}", slide.id),
        });
    }
    let thumbnail = if cfg.thumbnails {
        Some(stored(slide.image.box_downsample(factor)?, cfg.format))
    } else {
        None
    };
    Ok(ProcessedSlide {
        record: SlideRecord {
            id: slide.id.clone(),
            label: slide.label,
            split: split.to_string(),
            seed: slide.seed,
            width: slide.image.width,
            height: slide.image.height,
            patch_size: cfg.patch_size,
            tumor_cells: slide.tumor_cells.clone(),
            patches: records,
            tissue_recall: hit as f64 / blob_area as f64,
            background_fp: fp as f64 / bg_area as f64,
            thumbnail: cfg.thumbnails.then(|| raster_file(&format!("{}_thumb", slide.id), cfg.format)),
        },
        patches,
        thumbnail,
    })
}

/// Seed of slide `index` under run seed `seed`.
pub fn slide_seed(seed: u64, index: usize) -> u64 {
    derive_seed(derive_seed(seed, 0x511DE), index as u64)
}

/// Generate, segment and patch every slide. Positives come first
/// (`slide_0000..`), then negatives; patch samples are labeled 1 for tumor
/// cells and carry their slide's split.
pub fn synth_slides(cfg: &SlideSynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.positives + cfg.negatives;
    let labels: Vec<usize> = (0..n).map(|i| usize::from(i < cfg.positives)).collect();
    let splits = cfg.splits.assign(&labels, seed);
    let processed = (0..n)
        .into_par_iter()
        .map(|i| {
            let id = format!("slide_{i:04}");
            let slide = generate_slide(cfg, &id, labels[i], slide_seed(seed, i))?;
            process_slide(cfg, &slide, &splits[i])
        })
        .collect::<Result<Vec<_>>>()?;

    let mut samples = Vec::new();
    let mut images = Vec::new();
    let mut slides = Vec::with_capacity(n);
    let mut thumbnails = Vec::new();
    for p in processed {
        for (patch, img) in p.record.patches.iter().zip(p.patches) {
            samples.push(SampleEntry {
                id: patch.sample.clone(),
                label: usize::from(patch.tumor),
                split: p.record.split.clone(),
                file: raster_file(&patch.sample, cfg.format),
            });
            images.push(img);
        }
        thumbnails.extend(p.thumbnail);
        slides.push(p.record);
    }
    let train: Vec<&RgbImage> = samples.iter().zip(&images).filter(|(s, _)| s.split == "train").map(|(_, i)| i).collect();
    let means = if train.is_empty() { channel_means(&images)? } else { channel_means(train)? };
    Ok(Dataset {
        manifest: Manifest {
            version: MANIFEST_VERSION,
            kind: DatasetKind::Slide,
            seed,
            config: serde_json::to_value(cfg)?,
            channel_means: means,
            raster_format: cfg.format,
            num_classes: 2,
            samples,
            slides,
        },
        images,
        thumbnails,
    })
}
