//! Dataset manifests and image loading.
//!
//! A manifest is a CSV file with a `path,label` header and an optional
//! third `split` column (`train`, `query` or `database`). Relative paths
//! resolve against the manifest's directory. Labels are 1-based and must
//! cover `1..=C` without gaps.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;

use crate::collab::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Per-channel normalization applied to 8-bit pixels scaled to `[0, 1]`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Database,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Database => "database",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "database" => Ok(Split::Database),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: usize,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let (Some(pc), Some(lc)) = (col("path"), col("label")) else {
            return Err(Error::data(path, "manifest header must contain `path` and `label`"));
        };
        let sc = col("split");
        let mut rows = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_error(path, e))?;
            let field = |i: usize| record.get(i).unwrap_or("").trim();
            let label = field(lc).parse::<usize>().map_err(|_| {
                Error::data(path, format!("row {}: bad label `{}`", line + 2, field(lc)))
            })?;
            let p = PathBuf::from(field(pc));
            let p = if p.is_absolute() { p } else { base.join(p) };
            let split = match sc.map(field) {
                Some("") | None => None,
                Some(s) => Some(s.parse()?),
            };
            rows.push(ManifestRow { path: p, label, split });
        }
        let m = Self { rows };
        m.validate().map_err(|e| Error::data(path, e.to_string()))?;
        Ok(m)
    }

    /// Writes paths relative to the manifest's directory when possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let with_split = self.rows.iter().any(|r| r.split.is_some());
        let header: &[&str] = if with_split {
            &["path", "label", "split"]
        } else {
            &["path", "label"]
        };
        w.write_record(header).map_err(|e| csv_error(path, e))?;
        for row in &self.rows {
            let rel = row.path.strip_prefix(&base).unwrap_or(&row.path);
            let mut rec = vec![rel.to_string_lossy().into_owned(), row.label.to_string()];
            if with_split {
                rec.push(row.split.map(|s| s.to_string()).unwrap_or_default());
            }
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn num_classes(&self) -> usize {
        self.rows.iter().map(|r| r.label).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let labels: BTreeSet<usize> = self.rows.iter().map(|r| r.label).collect();
        if labels.contains(&0) {
            return Err(Error::Format("labels are 1-based".into()));
        }
        let c = self.num_classes();
        if labels.len() != c {
            return Err(Error::Format(format!(
                "labels must cover 1..={c} without gaps, found {} distinct",
                labels.len()
            )));
        }
        Ok(())
    }

    /// Rows of one split. Rows without a split tag belong to every split.
    pub fn split(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            rows: self
                .rows
                .iter()
                .filter(|r| r.split.is_none_or(|s| s == split))
                .cloned()
                .collect(),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn load_samples(&self, size: usize) -> Result<Vec<Sample>> {
        self.rows
            .iter()
            .map(|r| {
                Ok(Sample {
                    image: load_image(&r.path, size)?,
                    label: r.label,
                })
            })
            .collect()
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::data(path, format!("{other:?}")),
    }
}

/// Normalized `3 × H × W` tensor of an 8-bit RGB image.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor3 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor3::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let v = px.0[c] as f64 / 255.0;
            t.set(c, y as usize, x as usize, (v - PIXEL_MEAN) / PIXEL_STD);
        }
    }
    t
}

/// Decode an image file, resize to `size × size` if needed and normalize.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor3> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "image not found"),
        ));
    }
    let img = image::open(path)
        .map_err(|e| Error::data(path, e.to_string()))?
        .to_rgb8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    Ok(rgb_to_tensor(&img))
}
