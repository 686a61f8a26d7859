//! Evaluation metrics: Fréchet distance between feature Gaussians
//! ("desk-FID", with a locally trained classifier as the feature model) and
//! total-variation distance between histograms.

use candle_core::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::Dataset;
use crate::error::{ensure, Result};
use crate::recognition::{pixel_lattice, LatticeClassifier};
use crate::types::ImageBatch;

pub const MIN_FID_SAMPLES: usize = 256;
/// Diagonal shrinkage added when a covariance is numerically singular.
pub const SHRINKAGE: f64 = 1e-6;
const CHUNK: usize = 256;

/// Mean and covariance of row-major features `[n, d]`.
#[derive(Debug, Clone)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(rows.len() >= 2, Validation, "need at least two feature rows");
        let d = rows[0].len();
        ensure!(rows.iter().all(|r| r.len() == d), Shape, "ragged feature rows");
        let n = rows.len();
        let data = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_iterator(d, data.column_iter().map(|c| c.sum() / n as f64));
        let centered = DMatrix::from_fn(n, d, |i, j| data[(i, j)] - mean[j]);
        let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
        let mut g = Self { mean, cov };
        g.regularize();
        Ok(g)
    }

    fn regularize(&mut self) {
        let eig = SymmetricEigen::new(self.cov.clone());
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if min < SHRINKAGE {
            log::warn!("singular feature covariance (min eigenvalue {min:.3e}); adding {SHRINKAGE:e} to the diagonal");
            for i in 0..self.cov.nrows() {
                self.cov[(i, i)] += SHRINKAGE;
            }
        }
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(A + B - 2 (A^1/2 B A^1/2)^1/2)`.
pub fn frechet_distance(a: &Gaussian, b: &Gaussian) -> f64 {
    let diff = &a.mean - &b.mean;
    let root_a = psd_sqrt(&a.cov);
    let inner = &root_a * &b.cov * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    (diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0)
}

/// Penultimate classifier features for an image batch, chunked.
pub fn image_features(model: &LatticeClassifier, images: &ImageBatch) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(images.batch());
    let mut start = 0;
    while start < images.batch() {
        let len = CHUNK.min(images.batch() - start);
        let f: Tensor = model.features(&pixel_lattice(&images.narrow(start, len)?)?)?;
        let f = f.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
        rows.extend(f);
        start += len;
    }
    Ok(rows)
}

/// Desk-FID between two image sets under `feature_model`.
pub fn desk_fid(images_a: &ImageBatch, images_b: &ImageBatch, feature_model: &LatticeClassifier) -> Result<f64> {
    ensure!(
        images_a.batch() >= MIN_FID_SAMPLES && images_b.batch() >= MIN_FID_SAMPLES,
        Validation,
        "desk-FID needs at least {MIN_FID_SAMPLES} images per set, got {} and {}",
        images_a.batch(),
        images_b.batch()
    );
    let a = Gaussian::fit(&image_features(feature_model, images_a)?)?;
    let b = Gaussian::fit(&image_features(feature_model, images_b)?)?;
    Ok(frechet_distance(&a, &b))
}

/// Images with every pixel uniform in `[-1, 1]`.
pub fn uniform_noise_images(n: usize, resolution: usize, seed: u64) -> Result<ImageBatch> {
    use rand::Rng;
    let mut r = crate::nn::rng(seed);
    let v: Vec<f32> = (0..n * 3 * resolution * resolution).map(|_| r.random_range(-1.0..1.0)).collect();
    ImageBatch::from_vec(v, (n, 3, resolution, resolution))
}

/// First `n` images of a dataset as one batch.
pub fn head_images(data: &Dataset, n: usize) -> Result<ImageBatch> {
    let idx: Vec<usize> = (0..n.min(data.len())).collect();
    data.batch(&idx)
}

/// Half the L1 distance between two normalized histograms.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
