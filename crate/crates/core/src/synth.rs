//! Synthetic fine-grained dataset: every image shares the same background
//! and body shape, and classes differ only by a small planted glyph at a
//! random position.
//!
//! Glyph boxes are written next to the manifest for evaluating
//! localization. Training never reads them.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::collab::Sample;
use crate::data::{rgb_to_tensor, DatasetManifest, ManifestRow, Split};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Cells per glyph side; each glyph is a `GLYPH_GRID × GLYPH_GRID` pattern.
pub const GLYPH_GRID: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub query_per_class: usize,
    pub canvas: usize,
    pub glyph: usize,
    /// Standard deviation of per-pixel Gaussian noise on the `[0, 1]` scale.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            train_per_class: 16,
            query_per_class: 8,
            canvas: 224,
            glyph: 32,
            noise: 0.05,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic data needs at least two classes".into()));
        }
        if self.glyph == 0 || self.glyph > self.canvas {
            return Err(Error::Config(format!(
                "glyph size {} does not fit a {} canvas",
                self.glyph, self.canvas
            )));
        }
        if self.num_classes > 1 << (GLYPH_GRID * GLYPH_GRID - 4) {
            return Err(Error::Config("too many classes for distinct glyphs".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthItem {
    pub image: RgbImage,
    pub label: usize,
    pub split: Split,
    pub glyph_box: BoundingBox,
}

impl SynthItem {
    pub fn sample(&self) -> Sample {
        Sample {
            image: rgb_to_tensor(&self.image),
            label: self.label,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub patterns: Vec<[bool; GLYPH_GRID * GLYPH_GRID]>,
    pub items: Vec<SynthItem>,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SynthItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn samples(&self, split: Split) -> Vec<Sample> {
        self.split(split).map(SynthItem::sample).collect()
    }
}

/// Class glyphs: distinct 4×4 patterns with 6 to 10 dark cells, pairwise
/// differing in at least 4 cells.
pub fn class_patterns(num_classes: usize, seed: u64) -> Vec<[bool; GLYPH_GRID * GLYPH_GRID]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x61f3_9a0b);
    let mut out: Vec<[bool; GLYPH_GRID * GLYPH_GRID]> = Vec::with_capacity(num_classes);
    while out.len() < num_classes {
        let mut p = [false; GLYPH_GRID * GLYPH_GRID];
        p.iter_mut().for_each(|c| *c = rng.gen_bool(0.5));
        let dark = p.iter().filter(|c| **c).count();
        if !(6..=10).contains(&dark) {
            continue;
        }
        let far = out
            .iter()
            .all(|q| q.iter().zip(&p).filter(|(a, b)| a != b).count() >= 4);
        if far {
            out.push(p);
        }
    }
    out
}

fn clamp_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn render(
    spec: &SyntheticSpec,
    pattern: &[bool; GLYPH_GRID * GLYPH_GRID],
    rng: &mut ChaCha8Rng,
) -> (RgbImage, BoundingBox) {
    let n = spec.canvas;
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid std");
    let nf = n as f64;
    // shared body: an ellipse with a little jitter
    let cx = nf / 2.0 + rng.gen_range(-0.07..0.07) * nf;
    let cy = nf / 2.0 + rng.gen_range(-0.07..0.07) * nf;
    let rx = nf * rng.gen_range(0.30..0.34);
    let ry = nf * rng.gen_range(0.22..0.26);
    let g = spec.glyph;
    let gx = rng.gen_range(0..=n - g);
    let gy = rng.gen_range(0..=n - g);
    let cell = g as f64 / GLYPH_GRID as f64;

    let mut img = RgbImage::new(n as u32, n as u32);
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = yf / nf;
            let mut rgb = [0.55 + 0.15 * t, 0.65 + 0.1 * t, 0.75 - 0.1 * t];
            let d = ((xf - cx) / rx).powi(2) + ((yf - cy) / ry).powi(2);
            if d <= 1.0 {
                rgb = [0.55, 0.42, 0.30];
            }
            if x >= gx && x < gx + g && y >= gy && y < gy + g {
                let col = (((x - gx) as f64) / cell) as usize;
                let row = (((y - gy) as f64) / cell) as usize;
                let v = if pattern[row.min(GLYPH_GRID - 1) * GLYPH_GRID + col.min(GLYPH_GRID - 1)] {
                    0.08
                } else {
                    0.92
                };
                rgb = [v, v, v];
            }
            let px = [
                clamp_u8(rgb[0] + noise.sample(rng) * (spec.noise > 0.0) as u8 as f64),
                clamp_u8(rgb[1] + noise.sample(rng) * (spec.noise > 0.0) as u8 as f64),
                clamp_u8(rgb[2] + noise.sample(rng) * (spec.noise > 0.0) as u8 as f64),
            ];
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    let bbox = BoundingBox::new(gx as f64, gy as f64, (gx + g) as f64, (gy + g) as f64);
    (img, bbox)
}

/// Build the dataset in memory. Items are ordered train first, then query,
/// class-interleaved within each split.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let patterns = class_patterns(spec.num_classes, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut items = Vec::new();
    for (split, per_class) in [(Split::Train, spec.train_per_class), (Split::Query, spec.query_per_class)] {
        for i in 0..per_class * spec.num_classes {
            let label = i % spec.num_classes + 1;
            let (image, glyph_box) = render(spec, &patterns[label - 1], &mut rng);
            items.push(SynthItem {
                image,
                label,
                split,
                glyph_box,
            });
        }
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        patterns,
        items,
    })
}

/// Paths written by [`write_dataset`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticOutput {
    pub manifest: PathBuf,
    pub boxes: PathBuf,
    pub images: Vec<PathBuf>,
}

/// Generate and write PNG images, `manifest.csv` (`path,label,split`) and
/// `boxes.csv` (`path,x_min,y_min,x_max,y_max`) under `dir`.
pub fn synth_generate(spec: &SyntheticSpec, dir: &Path) -> Result<SyntheticOutput> {
    let data = generate(spec)?;
    write_dataset(&data, dir)
}

pub fn write_dataset(data: &SyntheticDataset, dir: &Path) -> Result<SyntheticOutput> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut rows = Vec::with_capacity(data.items.len());
    let mut images = Vec::with_capacity(data.items.len());
    let boxes_path = dir.join("boxes.csv");
    let mut boxes = csv::Writer::from_path(&boxes_path)
        .map_err(|e| Error::data(&boxes_path, e.to_string()))?;
    boxes
        .write_record(["path", "x_min", "y_min", "x_max", "y_max"])
        .map_err(|e| Error::data(&boxes_path, e.to_string()))?;
    let mut counters = [0usize; 2];
    for item in &data.items {
        let k = usize::from(item.split != Split::Train);
        let name = format!("{}_{:04}.png", item.split, counters[k]);
        counters[k] += 1;
        let path = img_dir.join(&name);
        item.image
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::data(&path, e.to_string()))?;
        let rel = format!("images/{name}");
        let b = item.glyph_box;
        boxes
            .write_record([
                rel.clone(),
                b.x_min.to_string(),
                b.y_min.to_string(),
                b.x_max.to_string(),
                b.y_max.to_string(),
            ])
            .map_err(|e| Error::data(&boxes_path, e.to_string()))?;
        rows.push(ManifestRow {
            path: path.clone(),
            label: item.label,
            split: Some(item.split),
        });
        images.push(path);
    }
    boxes.flush().map_err(|e| Error::io(&boxes_path, e))?;
    let manifest = dir.join("manifest.csv");
    DatasetManifest { rows }.write(&manifest)?;
    Ok(SyntheticOutput {
        manifest,
        boxes: boxes_path,
        images,
    })
}

/// Read `boxes.csv`, resolving paths against its directory.
pub fn read_boxes(path: &Path) -> Result<Vec<(PathBuf, BoundingBox)>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::data(path, e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::data(path, format!("bad box row {rec:?}")))
        };
        let p = PathBuf::from(rec.get(0).unwrap_or("").trim());
        out.push((base.join(p), BoundingBox::new(num(1)?, num(2)?, num(3)?, num(4)?)));
    }
    Ok(out)
}
