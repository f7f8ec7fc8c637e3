//! Fréchet distance between Gaussian fits of image features, and
//! checkpoint selection by lowest distance.

mod extract;

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Stage;
use crate::diffusion::DiffusionModel;
use crate::error::{Error, Result};
use crate::gan::GanModel;
use crate::raster::GrayImage;

pub use extract::{embed_images, FeatureExtractor, ToyPool, INCEPTION_ID, TOY_POOL_ID};

/// Eigenvalues in `(-CLIP_TOL, 0)` are treated as zero.
pub const CLIP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

/// Sample mean and unbiased covariance of feature rows. A single row
/// yields a zero covariance.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n == 0 {
        return Err(Error::Empty("feature matrix"));
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|r| r.len() != d) {
        return Err(Error::Shape {
            expected: vec![d],
            actual: vec![bad.len()],
        });
    }
    let mut mu = DVector::zeros(d);
    for r in features {
        for j in 0..d {
            mu[j] += r[j];
        }
    }
    mu /= n as f64;
    let mut sigma = DMatrix::zeros(d, d);
    if n > 1 {
        let centered = DMatrix::from_fn(n, d, |i, j| features[i][j] - mu[j]);
        sigma = centered.transpose() * &centered / (n - 1) as f64;
        sigma = (&sigma + sigma.transpose()) * 0.5;
    }
    Ok(GaussianStats { mu, sigma, n })
}

/// Principal square root of a symmetric positive semidefinite matrix.
/// Small negative eigenvalues are clipped; clearly negative ones fail.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::MatrixSqrt(format!("matrix is {}×{}", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::MatrixSqrt("matrix has non-finite entries".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::MatrixSqrt(format!("eigendecomposition of a {}×{} matrix did not converge", m.nrows(), m.nrows())))?;
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= -CLIP_TOL {
        let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::MatrixSqrt(format!(
            "eigenvalue {min:.3e} below tolerance (largest {max:.3e}, condition {:.3e})",
            max.abs() / min.abs().max(f64::MIN_POSITIVE)
        )));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let sa = sqrtm_psd(a)?;
    let inner = &sa * b * &sa;
    Ok(sqrtm_psd(&inner)?.trace())
}

/// `Tr((A B)^{1/2})` evaluated from both sides and averaged, so the result
/// does not depend on argument order.
fn cross_term(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    Ok(0.5 * (trace_sqrt_product(a, b)? + trace_sqrt_product(b, a)?))
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, clipped at zero.
/// On a failed square root both covariances get a small diagonal offset
/// and the computation is retried once.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.mu.len();
    if b.mu.len() != d || a.sigma.nrows() != d || b.sigma.nrows() != d {
        return Err(Error::Shape {
            expected: vec![d],
            actual: vec![b.mu.len()],
        });
    }
    if a.mu == b.mu && a.sigma == b.sigma {
        return Ok(0.0);
    }
    let diff = &a.mu - &b.mu;
    let mean_term = diff.dot(&diff);
    let cross = match cross_term(&a.sigma, &b.sigma) {
        Ok(t) => t,
        Err(first) => {
            let scale = (a.sigma.trace() + b.sigma.trace()).abs() / (2.0 * d as f64);
            let offset = DMatrix::identity(d, d) * 1e-6 * scale.max(1e-12);
            match cross_term(&(&a.sigma + &offset), &(&b.sigma + &offset)) {
                Ok(t) => t,
                Err(second) => {
                    return Err(Error::MatrixSqrt(format!("{first}; after regularization: {second}")));
                }
            }
        }
    };
    let value = mean_term + (a.sigma.trace() + b.sigma.trace()) - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Something that can draw images from a trained checkpoint.
pub trait ImageSampler {
    fn sample_images(&self, n: usize, seed: u64) -> Result<Vec<GrayImage>>;
}

impl ImageSampler for DiffusionModel {
    fn sample_images(&self, n: usize, seed: u64) -> Result<Vec<GrayImage>> {
        self.sample(n, seed)
    }
}

impl ImageSampler for GanModel {
    fn sample_images(&self, n: usize, seed: u64) -> Result<Vec<GrayImage>> {
        self.sample(n, seed)
    }
}

impl ImageSampler for Vec<GrayImage> {
    fn sample_images(&self, n: usize, _seed: u64) -> Result<Vec<GrayImage>> {
        if n > self.len() {
            return Err(Error::Invalid(format!("asked for {n} of {} fixed images", self.len())));
        }
        Ok(self[..n].to_vec())
    }
}

pub fn fid_between(real: &[GrayImage], fake: &[GrayImage], extractor: &str) -> Result<f64> {
    let a = gaussian_stats(&embed_images(real, extractor)?)?;
    let b = gaussian_stats(&embed_images(fake, extractor)?)?;
    frechet_distance(&a, &b)
}

/// Samples `n_samples` images from `model` and measures their distance to
/// `real_train`.
pub fn fid_of_checkpoint(
    model: &dyn ImageSampler,
    real_train: &[GrayImage],
    n_samples: usize,
    extractor: &str,
    seed: u64,
) -> Result<f64> {
    if n_samples < 2 {
        return Err(Error::Invalid("FID needs at least two samples".into()));
    }
    let fake = model.sample_images(n_samples, seed)?;
    fid_between(real_train, &fake, extractor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidEntry {
    /// Epoch or step the checkpoint was taken at.
    pub epoch: usize,
    pub fid: f64,
    pub checkpoint: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FidHistory {
    entries: Vec<FidEntry>,
}

impl FidHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: FidEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.epoch <= last.epoch {
                return Err(Error::Invalid(format!(
                    "epoch {} does not follow {}",
                    entry.epoch, last.epoch
                )));
            }
        }
        if !(entry.fid >= 0.0) {
            return Err(Error::Invalid(format!("FID must be nonnegative, got {}", entry.fid)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[FidEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl TryFrom<Vec<(usize, f64)>> for FidHistory {
    type Error = Error;

    fn try_from(v: Vec<(usize, f64)>) -> Result<Self> {
        let mut h = FidHistory::new();
        for (epoch, fid) in v {
            h.push(FidEntry {
                epoch,
                fid,
                checkpoint: format!("e{epoch}"),
            })?;
        }
        Ok(h)
    }
}

/// Entry with the lowest FID; the earliest one wins ties.
pub fn select_best(history: &FidHistory) -> Result<&FidEntry> {
    history
        .entries
        .iter()
        .reduce(|best, e| if e.fid < best.fid { e } else { best })
        .ok_or(Error::Empty("FID history"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidRow {
    pub stage: Stage,
    pub family: String,
    pub epoch: usize,
    pub fid: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub extractor: String,
}

pub fn write_fid_csv(path: &Path, rows: &[FidRow]) -> Result<()> {
    let err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    if rows.is_empty() {
        w.write_record(["stage", "family", "epoch", "fid", "n_real", "n_fake", "extractor"])
            .map_err(err)?;
    }
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_fid_csv(path: &Path) -> Result<Vec<FidRow>> {
    let err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().map(|row| row.map_err(err)).collect()
}
