//! Patch datasets: manifest files, PNG patches and in-memory loading.

mod checkpoint;
mod embeddings;
mod synthetic;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use embeddings::{read_embeddings, write_embeddings, EmbeddingRow, Embeddings};
pub use synthetic::{generate_synthetic, render_patch, PatchFactors, SyntheticConfig};

pub const MANIFEST_HEADER: [&str; 9] = [
    "path",
    "bag",
    "split",
    "label",
    "theta0",
    "size",
    "intensity",
    "boundary",
    "distractors",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Ground-truth generative factors of a synthetic patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Factors {
    pub theta0: f64,
    pub size: f64,
    pub intensity: f64,
    pub boundary: f64,
    pub distractors: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    /// Relative to the manifest's directory.
    pub path: String,
    pub bag: String,
    pub split: Split,
    pub label: usize,
    pub factors: Option<Factors>,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(MANIFEST_HEADER).map_err(csv_error)?;
    for r in rows {
        let mut rec = vec![r.path.clone(), r.bag.clone(), r.split.to_string(), r.label.to_string()];
        match r.factors {
            Some(f) => rec.extend([
                format!("{:.17}", f.theta0),
                format!("{:.17}", f.size),
                format!("{:.17}", f.intensity),
                format!("{:.17}", f.boundary),
                f.distractors.to_string(),
            ]),
            None => rec.extend(std::iter::repeat(String::new()).take(5)),
        }
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let header = r.headers().map_err(csv_error)?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("manifest header must be {}", MANIFEST_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let bad = |msg: String| Error::Parse { offset, msg };
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .map_err(|e| bad(format!("{}: {e}", MANIFEST_HEADER[i])))
        };
        let split = field(2).parse().map_err(|e: Error| bad(e.to_string()))?;
        let label = field(3).parse().map_err(|e| bad(format!("label: {e}")))?;
        let factors = if field(4).is_empty() {
            None
        } else {
            let theta0 = num(4)?;
            if !(0.0..std::f64::consts::TAU).contains(&theta0) {
                return Err(bad(format!("theta0 {theta0} outside [0, 2π)")));
            }
            Some(Factors {
                theta0,
                size: num(5)?,
                intensity: num(6)?,
                boundary: num(7)?,
                distractors: field(8).parse().map_err(|e| bad(format!("distractors: {e}")))?,
            })
        };
        rows.push(ManifestRow {
            path: field(0).to_string(),
            bag: field(1).to_string(),
            split,
            label,
            factors,
        });
    }
    Ok(rows)
}

fn csv_error(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            offset,
            msg: format!("{other:?}"),
        },
    }
}

/// Reads an 8-bit RGB image as `[3, H, W]` floats in `[0, 1]`.
pub fn load_patch(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Writes `[3, H, W]` values in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_patch(path: &Path, patch: &Tensor<f32>) -> Result<()> {
    let [c, h, w] = patch.shape() else {
        return Err(Error::shape("save_patch", format!("expected [3, H, W], got {:?}", patch.shape())));
    };
    if *c != 3 {
        return Err(Error::shape("save_patch", format!("expected 3 channels, got {c}")));
    }
    let d = patch.data();
    let img = image::RgbImage::from_fn(*w as u32, *h as u32, |x, y| {
        let px = |ch: usize| quantize(d[(ch * h + y as usize) * w + x as usize]);
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A manifest with every referenced patch loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    /// `[C, P, P]` per row.
    pub images: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn load(manifest: &Path) -> Result<Self> {
        let rows = read_manifest(manifest)?;
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut images = Vec::with_capacity(rows.len());
        for r in &rows {
            let img = load_patch(&root.join(&r.path))?;
            if let Some(first) = images.first() {
                let first: &Tensor<f32> = first;
                if first.shape() != img.shape() {
                    return Err(Error::shape("dataset", format!("{} has shape {:?}", r.path, img.shape())));
                }
            }
            images.push(img);
        }
        if rows.is_empty() {
            return Err(Error::Empty("manifest"));
        }
        Ok(Self { root, rows, images })
    }

    /// Loads `manifest` from a dataset directory or a manifest file path.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::load(&path.join("manifest.csv"))
        } else {
            Self::load(path)
        }
    }

    pub fn patch_size(&self) -> usize {
        self.images[0].shape()[1]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| self.rows[i].split == split).collect()
    }

    /// Bags of `split` in order of first appearance, with row indices.
    pub fn bags(&self, split: Split) -> Vec<(String, Vec<usize>)> {
        let mut bags: Vec<(String, Vec<usize>)> = Vec::new();
        for i in self.indices(split) {
            let bag = &self.rows[i].bag;
            match bags.iter_mut().find(|(b, _)| b == bag) {
                Some((_, v)) => v.push(i),
                None => bags.push((bag.clone(), vec![i])),
            }
        }
        bags
    }

    /// Stacks rows into a `[B, C, P, P]` batch.
    pub fn batch(&self, rows: &[usize]) -> Result<Tensor<f32>> {
        if rows.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let s = self.images[0].shape();
        let mut data = Vec::with_capacity(rows.len() * self.images[0].numel());
        for &r in rows {
            let img = self.images.get(r).ok_or(Error::Index {
                what: "patch",
                index: r,
                len: self.images.len(),
            })?;
            data.extend_from_slice(img.data());
        }
        Tensor::new(&[rows.len(), s[0], s[1], s[2]], data)
    }
}

/// Writes `contents` creating parent directories as needed.
pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}
