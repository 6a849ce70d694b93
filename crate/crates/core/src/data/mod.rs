//! Dataset ingestion, seeded splitting, resize-and-crop preprocessing and
//! augmentation for grayscale image / binary mask pairs.
//!
//! On-disk layout: `<root>/images/<stem>.{png,tif,tiff}` with the matching
//! `<root>/masks/<stem>.{png,tif,tiff}`. Any nonzero mask value is
//! foreground.

mod augment;
mod clahe;
mod resize;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grid::{BinaryMask, Grid, GridError};
use crate::scalar::Scalar;

pub use augment::{augment, elastic_field, AugmentRecord, AugmentationConfig, Warp};
pub use clahe::clahe;
pub use resize::{resize_and_crop, resize_bilinear, resize_nearest, scaled_dims};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("cannot write {path}: {reason}")]
    Encode { path: PathBuf, reason: String },
    #[error("no samples found under {0}")]
    NoSamples(PathBuf),
    #[error("image {0} has no mask")]
    MissingMask(String),
    #[error("{id}: image is {image:?} but mask is {mask:?}")]
    SizeMismatch {
        id: String,
        image: (usize, usize),
        mask: (usize, usize),
    },
    #[error("need {needed} samples but only {available} are available")]
    Insufficient { needed: usize, available: usize },
    #[error("{id}: source of size {height}x{width} is too small to resize")]
    Degenerate { id: String, height: usize, width: usize },
    #[error("invalid data config: {0}")]
    InvalidConfig(String),
    #[error("malformed split manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// One grayscale image in `[0, 1]` and its mask, at equal size.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub dataset: String,
    pub image: Grid<T>,
    pub mask: BinaryMask,
}

impl<T: Scalar> Sample<T> {
    pub fn new(id: impl Into<String>, dataset: impl Into<String>, image: Grid<T>, mask: BinaryMask) -> Result<Self, DataError> {
        let id = id.into();
        if image.shape() != mask.shape() {
            return Err(DataError::SizeMismatch {
                id,
                image: image.shape(),
                mask: mask.shape(),
            });
        }
        Ok(Self {
            id,
            dataset: dataset.into(),
            image,
            mask,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.image.shape()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    /// Free-form label carried into reports.
    pub name: String,
    pub root: PathBuf,
    /// Side of the square training resolution.
    pub target_size: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub split_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::preset(1).expect("preset 1 exists")
    }
}

impl DatasetSpec {
    /// The three phase-contrast single-cell sets: sizes, split counts and
    /// working resolutions. `root` is left relative for the caller to set.
    pub fn preset(index: u8) -> Option<Self> {
        let (total_train, test, size) = match index {
            1 => (25, 10, 512),
            2 => (38, 15, 256),
            3 => (36, 12, 256),
            _ => return None,
        };
        Some(Self {
            name: format!("dataset{index}"),
            root: PathBuf::from(format!("data/dataset{index}")),
            target_size: size,
            train_count: total_train,
            test_count: test,
            split_seed: 0,
        })
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.target_size < 1 {
            return Err(DataError::InvalidConfig("target_size must be positive".into()));
        }
        if self.train_count == 0 || self.test_count == 0 {
            return Err(DataError::InvalidConfig("train_count and test_count must be positive".into()));
        }
        Ok(())
    }
}

const EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>, DataError> {
    let io = |source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
                return Err(DataError::InvalidConfig(format!(
                    "{} and {} share the stem {stem}",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(out)
}

fn decode(path: &Path) -> Result<image::DynamicImage, DataError> {
    image::open(path).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads a grayscale image scaled to `[0, 1]`. Colour inputs are converted
/// to luma.
pub fn load_image<T: Scalar>(path: &Path) -> Result<Grid<T>, DataError> {
    let img = decode(path)?.to_luma32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| T::lit(v.clamp(0.0, 1.0) as f64)).collect();
    Ok(Grid::new(h, w, data)?)
}

/// Reads a mask; any nonzero channel value is foreground.
pub fn load_mask(path: &Path) -> Result<BinaryMask, DataError> {
    let img = decode(path)?.to_rgba16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bits = img.pixels().map(|p| u8::from(p.0[..3].iter().any(|&c| c != 0))).collect();
    Ok(BinaryMask::from_vec(h, w, bits)?)
}

/// Writes a mask as an 8-bit image with values 0 and 255.
pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<(), DataError> {
    let (h, w) = mask.shape();
    let buf = mask.as_slice().iter().map(|&b| if b != 0 { 255u8 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer matches size");
    img.save(path).map_err(|e| DataError::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Renders the prediction boundary in red over the grayscale image.
pub fn save_overlay<T: Scalar>(path: &Path, image: &Grid<T>, mask: &BinaryMask) -> Result<(), DataError> {
    let (h, w) = image.shape();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let v = (image.get(i, j).as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
            let inside = mask.get(i, j);
            let edge = inside
                && [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|&(di, dj)| {
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    a < 0 || b < 0 || a >= h as i64 || b >= w as i64 || !mask.get(a as usize, b as usize)
                });
            let px = if edge { [255, 0, 0] } else { [v, v, v] };
            img.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| DataError::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Lists the images of a directory in stem order.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>, DataError> {
    Ok(list_by_stem(dir)?.into_iter().collect())
}

/// Loads every image/mask pair under `spec.root`, sorted by id.
pub fn ingest<T: Scalar>(spec: &DatasetSpec) -> Result<Vec<Sample<T>>, DataError> {
    let images = list_by_stem(&spec.root.join("images"))?;
    let masks = list_by_stem(&spec.root.join("masks"))?;
    if images.is_empty() {
        return Err(DataError::NoSamples(spec.root.clone()));
    }
    for stem in masks.keys().filter(|k| !images.contains_key(*k)) {
        log::warn!("mask {stem} has no image and is ignored");
    }
    images
        .iter()
        .map(|(stem, img_path)| {
            let mask_path = masks.get(stem).ok_or_else(|| DataError::MissingMask(stem.clone()))?;
            Sample::new(stem.clone(), spec.name.clone(), load_image(img_path)?, load_mask(mask_path)?)
        })
        .collect()
}

/// Disjoint train and test id lists.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Held out of `train` for validation; empty until assigned.
    pub validation: Vec<String>,
}

/// Shuffles the sorted ids under `seed` and takes the first `train_count`
/// for training and the next `test_count` for testing.
pub fn split_ids(ids: &[String], train_count: usize, test_count: usize, seed: u64) -> Result<Split, DataError> {
    let needed = train_count + test_count;
    if needed > ids.len() {
        return Err(DataError::Insufficient {
            needed,
            available: ids.len(),
        });
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(DataError::InvalidConfig("duplicate sample ids".into()));
    }
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Split {
        train: sorted[..train_count].to_vec(),
        test: sorted[train_count..needed].to_vec(),
        validation: Vec::new(),
    })
}

pub fn split<T: Scalar>(samples: &[Sample<T>], spec: &DatasetSpec) -> Result<Split, DataError> {
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    split_ids(&ids, spec.train_count, spec.test_count, spec.split_seed)
}

impl Split {
    /// Moves `floor(fraction * |train|)` seeded picks from train to
    /// validation.
    pub fn hold_out_validation(&mut self, fraction: f64, seed: u64) {
        let mut all = std::mem::take(&mut self.train);
        all.append(&mut self.validation);
        all.sort();
        let n_val = (fraction * all.len() as f64).floor() as usize;
        let mut shuffled = all.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7661_6c69_6461_7465));
        let val: std::collections::BTreeSet<_> = shuffled.into_iter().take(n_val).collect();
        self.validation = all.iter().filter(|id| val.contains(*id)).cloned().collect();
        self.train = all.into_iter().filter(|id| !val.contains(id)).collect();
    }

    /// Plain-text manifest: one `<partition> <id>` line per sample.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        for (name, ids) in [("train", &self.train), ("validation", &self.validation), ("test", &self.test)] {
            for id in ids {
                out.push_str(name);
                out.push(' ');
                out.push_str(id);
                out.push('\n');
            }
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self, DataError> {
        let mut s = Split::default();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (part, id) = line
                .split_once(' ')
                .ok_or_else(|| DataError::Manifest(format!("line {}: expected '<partition> <id>'", n + 1)))?;
            match part {
                "train" => s.train.push(id.to_string()),
                "validation" => s.validation.push(id.to_string()),
                "test" => s.test.push(id.to_string()),
                other => return Err(DataError::Manifest(format!("line {}: unknown partition {other}", n + 1))),
            }
        }
        Ok(s)
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.train.iter().chain(&self.validation).chain(&self.test).all(|id| seen.insert(id))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_manifest())
    }
}

/// Seed of the random stream for one sample in one epoch. Independent of
/// visiting order, so parallel or reordered processing draws the same values.
pub fn stream_seed(master: u64, id: &str, epoch: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(epoch.to_le_bytes());
    h.update(id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}
