//! Labeled 32x32 RGB image corpora.
//!
//! Three sources: a procedural `shapes` set (ten shape classes drawn in a
//! small flat palette, fully determined by a seed), CIFAR-10 binary batches
//! and a `<root>/<class>/<image>.png` folder tree.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{derive_seed, rng};
use crate::types::ImageBatch;

pub const DATA_ROOT_ENV: &str = "ADDP_DATA_ROOT";
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Shapes,
    Cifar10Bin,
    ImageFolder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Required for file-backed kinds; relative paths resolve against
    /// `$ADDP_DATA_ROOT` when it is set.
    #[serde(default)]
    pub path: Option<String>,
    pub n_train: usize,
    pub n_val: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
}

fn default_resolution() -> usize {
    32
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { kind: DatasetKind::Shapes, path: None, n_train: 4096, n_val: 512, resolution: 32 }
    }
}

/// Images in `[-1, 1]`, stored flat as `[N, 3, R, R]`, plus class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pixels: Vec<f32>,
    labels: Vec<u32>,
    n_classes: usize,
    resolution: usize,
}

impl Dataset {
    pub fn new(pixels: Vec<f32>, labels: Vec<u32>, n_classes: usize, resolution: usize) -> Result<Self> {
        let per = CHANNELS * resolution * resolution;
        if pixels.len() != labels.len() * per {
            return Err(Error::Dataset(format!(
                "{} pixel values for {} images of {resolution}x{resolution}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::Dataset(format!("label {l} >= class count {n_classes}")));
        }
        Ok(Self { pixels, labels, n_classes, resolution })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    fn per_image(&self) -> usize {
        CHANNELS * self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.per_image();
        &self.pixels[i * p..(i + 1) * p]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        let mut v = Vec::with_capacity(indices.len() * self.per_image());
        for &i in indices {
            v.extend_from_slice(self.image(i));
        }
        ImageBatch::from_vec(v, (indices.len(), CHANNELS, self.resolution, self.resolution))
    }

    pub fn all(&self) -> Result<ImageBatch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.per_image());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self { pixels, labels, n_classes: self.n_classes, resolution: self.resolution }
    }

    /// Seeded split into `(train, val)`; both halves are capped at the
    /// requested sizes.
    pub fn split(&self, n_train: usize, n_val: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if n_train + n_val > self.len() {
            return Err(Error::Dataset(format!(
                "requested {n_train} + {n_val} images but the source has {}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng(derive_seed(seed, "split")));
        Ok((self.subset(&order[..n_train]), self.subset(&order[n_train..n_train + n_val])))
    }
}

pub fn resolve_path(raw: &str) -> PathBuf {
    let p = PathBuf::from(raw);
    if p.is_absolute() {
        return p;
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(p),
        None => p,
    }
}

/// Loads the configured corpus and returns its seeded `(train, val)` split.
pub fn load(cfg: &DatasetConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let total = cfg.n_train + cfg.n_val;
    let full = match cfg.kind {
        DatasetKind::Shapes => shapes(total, cfg.resolution, derive_seed(seed, "shapes"))?,
        DatasetKind::Cifar10Bin => load_cifar10_bin(&required_path(cfg)?)?,
        DatasetKind::ImageFolder => load_image_folder(&required_path(cfg)?, cfg.resolution)?,
    };
    full.split(cfg.n_train, cfg.n_val, seed)
}

fn required_path(cfg: &DatasetConfig) -> Result<PathBuf> {
    let raw =
        cfg.path.as_deref().ok_or_else(|| Error::Config("dataset.path is required for this dataset kind".into()))?;
    let p = resolve_path(raw);
    if !p.exists() {
        return Err(Error::Config(format!("dataset.path `{}` does not exist", p.display())));
    }
    Ok(p)
}

pub const SHAPE_CLASSES: [&str; 10] =
    ["disk", "square", "triangle", "ring", "plus", "hbar", "vbar", "diamond", "saltire", "frame"];

const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.80, 0.30],
    [0.20, 0.30, 0.90],
    [0.95, 0.85, 0.20],
    [0.95, 0.95, 0.95],
    [0.10, 0.10, 0.10],
    [0.60, 0.30, 0.80],
    [0.20, 0.70, 0.70],
];

fn inside(class: usize, dx: f32, dy: f32, r: f32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let thick = (r * 0.4).max(2.0);
    match class {
        0 => dx * dx + dy * dy <= r * r,
        1 => ax <= r * 0.8 && ay <= r * 0.8,
        2 => dy <= r * 0.7 && dy >= -r * 0.9 && ax <= (dy + r * 0.9) * 0.6,
        3 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (r - thick).powi(2)
        }
        4 => (ax <= thick * 0.5 && ay <= r) || (ay <= thick * 0.5 && ax <= r),
        5 => ax <= r && ay <= thick * 0.5,
        6 => ay <= r && ax <= thick * 0.5,
        7 => ax + ay <= r,
        8 => ((dx - dy).abs() <= thick * 0.7 || (dx + dy).abs() <= thick * 0.7) && ax <= r * 0.8 && ay <= r * 0.8,
        _ => {
            let outer = ax <= r * 0.85 && ay <= r * 0.85;
            let inner = ax <= r * 0.85 - thick && ay <= r * 0.85 - thick;
            outer && !inner
        }
    }
}

/// Procedural labeled corpus; image `i` depends only on `(seed, i)`.
pub fn shapes(n: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    let per = CHANNELS * resolution * resolution;
    let mut pixels = vec![0f32; n * per];
    let mut labels = Vec::with_capacity(n);
    let scale = resolution as f32 / 32.0;
    for i in 0..n {
        let mut r = rng(derive_seed(seed, &format!("img{i}")));
        let class = i % SHAPE_CLASSES.len();
        let bg = r.random_range(0..PALETTE.len());
        let mut fg = r.random_range(0..PALETTE.len() - 1);
        if fg >= bg {
            fg += 1;
        }
        let radius = r.random_range(7.0..11.0f32) * scale;
        let cx = r.random_range(11.0..21.0f32) * scale;
        let cy = r.random_range(11.0..21.0f32) * scale;
        let img = &mut pixels[i * per..(i + 1) * per];
        for y in 0..resolution {
            for x in 0..resolution {
                let hit = inside(class, x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, radius);
                let color = if hit { PALETTE[fg] } else { PALETTE[bg] };
                for (c, &v) in color.iter().enumerate() {
                    img[(c * resolution + y) * resolution + x] = v * 2.0 - 1.0;
                }
            }
        }
        labels.push(class as u32);
    }
    Dataset::new(pixels, labels, SHAPE_CLASSES.len(), resolution)
}

/// CIFAR-10 binary batches (`*.bin`, records of 1 label byte + 3072 bytes).
pub fn load_cifar10_bin(dir: &Path) -> Result<Dataset> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no .bin batches under {}", dir.display())));
    }
    const REC: usize = 1 + 3072;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
        if bytes.len() % REC != 0 {
            return Err(Error::Dataset(format!("{} is not a CIFAR-10 batch", f.display())));
        }
        for rec in bytes.chunks(REC) {
            labels.push(rec[0] as u32);
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 127.5 - 1.0));
        }
    }
    Dataset::new(pixels, labels, 10, 32)
}

/// `<dir>/<class>/<file>.png`; classes are the sorted subdirectory names.
pub fn load_image_folder(dir: &Path, resolution: usize) -> Result<Dataset> {
    let mut classes: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (label, cdir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(cdir)
            .map_err(|e| Error::io(cdir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f)?.to_rgb8();
            if img.width() as usize != resolution || img.height() as usize != resolution {
                return Err(Error::Dataset(format!(
                    "{} is {}x{}, expected {resolution}x{resolution}",
                    f.display(),
                    img.width(),
                    img.height()
                )));
            }
            for c in 0..CHANNELS {
                for y in 0..resolution {
                    for x in 0..resolution {
                        let v = img.get_pixel(x as u32, y as u32)[c];
                        pixels.push(v as f32 / 127.5 - 1.0);
                    }
                }
            }
            labels.push(label as u32);
        }
    }
    Dataset::new(pixels, labels, classes.len().max(1), resolution)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_deterministic_and_balanced() {
        let a = shapes(40, 32, 5).unwrap();
        let b = shapes(40, 32, 5).unwrap();
        assert_eq!(a.image(7), b.image(7));
        assert!(a.image(7).iter().all(|v| (-1.0..=1.0).contains(v)));
        for c in 0..10u32 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 4);
        }
    }

    #[test]
    fn every_shape_class_draws_foreground() {
        let d = shapes(10, 32, 1).unwrap();
        for i in 0..10 {
            let img = d.image(i);
            let first = (img[0], img[1024], img[2048]);
            let distinct = (0..1024).any(|p| (img[p], img[1024 + p], img[2048 + p]) != first);
            assert!(distinct, "class {i} drew nothing");
        }
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let d = shapes(30, 32, 2).unwrap();
        let (tr, va) = d.split(20, 10, 9).unwrap();
        assert_eq!((tr.len(), va.len()), (20, 10));
        assert!(d.split(25, 10, 9).is_err());
    }

    #[test]
    fn missing_path_names_the_key() {
        let cfg = DatasetConfig {
            kind: DatasetKind::ImageFolder,
            path: Some("/definitely/not/here".into()),
            ..Default::default()
        };
        let err = load(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("dataset.path"), "{err}");
    }

    #[test]
    fn image_folder_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for (ci, name) in ["a", "b"].iter().enumerate() {
            std::fs::create_dir(dir.path().join(name)).unwrap();
            let img = image::RgbImage::from_pixel(32, 32, image::Rgb([ci as u8 * 255, 0, 0]));
            img.save(dir.path().join(name).join("0.png")).unwrap();
        }
        let d = load_image_folder(dir.path(), 32).unwrap();
        assert_eq!(d.labels(), &[0, 1]);
        assert_eq!(d.image(1)[0], 1.0);
    }
}
