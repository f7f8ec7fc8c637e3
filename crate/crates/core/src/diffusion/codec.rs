use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::gemm;
use crate::raster::GrayImage;

/// Shape and kind of a latent codec, without its learned arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CodecSpec {
    /// Pixels mapped to `[-1, 1]` at `resolution`.
    Identity { resolution: usize },
    /// Area-downsampled to `latent_resolution`, then mapped to `[-1, 1]`.
    Pooled { resolution: usize, latent_resolution: usize },
    /// Linear autoencoder learned from principal directions, latents whitened.
    Pca { resolution: usize, components: usize },
    /// Plain vectors, no image side.
    Vector { dim: usize },
}

/// Maps images to the vectors the denoiser works on and back.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    spec: CodecSpec,
    mean: Vec<f64>,
    /// `[components, pixels]`, orthonormal rows.
    basis: Vec<f64>,
    scale: Vec<f64>,
}

fn to_signed(img: &GrayImage, res: usize) -> Vec<f64> {
    let img = if img.width() == res && img.height() == res {
        img.clone()
    } else {
        img.resize(res, res)
    };
    img.pixels().iter().map(|v| 2.0 * v - 1.0).collect()
}

fn from_signed(v: &[f64], res: usize) -> GrayImage {
    let px = v.iter().map(|x| ((x + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
    GrayImage::from_vec(res, res, px).expect("latent length matches resolution")
}

impl LatentCodec {
    pub fn identity(resolution: usize) -> Self {
        Self::fixed(CodecSpec::Identity { resolution })
    }

    pub fn pooled(resolution: usize, latent_resolution: usize) -> Self {
        Self::fixed(CodecSpec::Pooled {
            resolution,
            latent_resolution,
        })
    }

    pub fn vector(dim: usize) -> Self {
        Self::fixed(CodecSpec::Vector { dim })
    }

    fn fixed(spec: CodecSpec) -> Self {
        LatentCodec {
            spec,
            mean: Vec::new(),
            basis: Vec::new(),
            scale: Vec::new(),
        }
    }

    /// Learns up to `components` principal directions from `images`.
    /// Directions with negligible variance are dropped, so the result may
    /// have fewer components than asked for.
    pub fn fit_pca(images: &[GrayImage], resolution: usize, components: usize) -> Result<Self> {
        if images.len() < 2 {
            return Err(Error::Invalid("codec fitting needs at least two images".into()));
        }
        if components == 0 {
            return Err(Error::Invalid("codec needs at least one component".into()));
        }
        let d = resolution * resolution;
        let n = images.len();
        let rows: Vec<Vec<f64>> = images.iter().map(|i| to_signed(i, resolution)).collect();
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut centered = Vec::with_capacity(n * d);
        for r in &rows {
            centered.extend(r.iter().zip(&mean).map(|(v, m)| v - m));
        }
        let mut gram = vec![0.0; n * n];
        gemm(n, d, n, &centered, false, &centered, true, 0.0, &mut gram);
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &gram));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let keep: Vec<usize> = order
            .into_iter()
            .filter(|&i| eig.eigenvalues[i] > 1e-9 * top.max(1e-300))
            .take(components)
            .collect();
        if keep.is_empty() {
            return Err(Error::Invalid("images have no variance to encode".into()));
        }
        let mut basis = vec![0.0; keep.len() * d];
        let mut scale = Vec::with_capacity(keep.len());
        for (j, &i) in keep.iter().enumerate() {
            let lambda = eig.eigenvalues[i];
            let u = eig.eigenvectors.column(i);
            let row = &mut basis[j * d..(j + 1) * d];
            for s in 0..n {
                let w = u[s] / lambda.sqrt();
                for (b, c) in row.iter_mut().zip(&centered[s * d..(s + 1) * d]) {
                    *b += w * c;
                }
            }
            scale.push((lambda / (n - 1) as f64).sqrt());
        }
        Ok(LatentCodec {
            spec: CodecSpec::Pca {
                resolution,
                components: keep.len(),
            },
            mean,
            basis,
            scale,
        })
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    /// Short human-readable identity, recorded in checkpoints.
    pub fn id(&self) -> String {
        match &self.spec {
            CodecSpec::Identity { resolution } => format!("identity-{resolution}"),
            CodecSpec::Pooled {
                resolution,
                latent_resolution,
            } => format!("pooled-{resolution}to{latent_resolution}"),
            CodecSpec::Pca {
                resolution,
                components,
            } => format!("pca-{resolution}x{components}"),
            CodecSpec::Vector { dim } => format!("vector-{dim}"),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match &self.spec {
            CodecSpec::Identity { resolution } => resolution * resolution,
            CodecSpec::Pooled { latent_resolution, .. } => latent_resolution * latent_resolution,
            CodecSpec::Pca { components, .. } => *components,
            CodecSpec::Vector { dim } => *dim,
        }
    }

    /// Side length of decoded images, `None` for vector codecs.
    pub fn resolution(&self) -> Option<usize> {
        match &self.spec {
            CodecSpec::Identity { resolution } | CodecSpec::Pooled { resolution, .. } | CodecSpec::Pca { resolution, .. } => {
                Some(*resolution)
            }
            CodecSpec::Vector { .. } => None,
        }
    }

    pub fn encode(&self, img: &GrayImage) -> Result<Vec<f64>> {
        match &self.spec {
            CodecSpec::Identity { resolution } => Ok(to_signed(img, *resolution)),
            CodecSpec::Pooled { latent_resolution, .. } => Ok(to_signed(img, *latent_resolution)),
            CodecSpec::Pca { resolution, components } => {
                let d = resolution * resolution;
                let x: Vec<f64> = to_signed(img, *resolution).iter().zip(&self.mean).map(|(v, m)| v - m).collect();
                let mut z = vec![0.0; *components];
                gemm(*components, d, 1, &self.basis, false, &x, false, 0.0, &mut z);
                Ok(z.iter().zip(&self.scale).map(|(v, s)| v / s).collect())
            }
            CodecSpec::Vector { .. } => Err(Error::Invalid("vector codec has no image side".into())),
        }
    }

    /// Decodes to an image with pixels clamped to `[0, 1]`.
    pub fn decode(&self, z: &[f64]) -> Result<GrayImage> {
        if z.len() != self.latent_dim() {
            return Err(Error::Shape {
                expected: vec![self.latent_dim()],
                actual: vec![z.len()],
            });
        }
        match &self.spec {
            CodecSpec::Identity { resolution } => Ok(from_signed(z, *resolution)),
            CodecSpec::Pooled {
                resolution,
                latent_resolution,
            } => Ok(from_signed(z, *latent_resolution).resize(*resolution, *resolution)),
            CodecSpec::Pca { resolution, components } => {
                let d = resolution * resolution;
                let zs: Vec<f64> = z.iter().zip(&self.scale).map(|(v, s)| v * s).collect();
                let mut x = self.mean.clone();
                gemm(1, *components, d, &zs, false, &self.basis, false, 1.0, &mut x);
                Ok(from_signed(&x, *resolution))
            }
            CodecSpec::Vector { .. } => Err(Error::Invalid("vector codec has no image side".into())),
        }
    }

    /// Learned arrays, flattened for checkpoint storage.
    pub fn params(&self) -> Vec<f64> {
        let mut v = self.mean.clone();
        v.extend_from_slice(&self.basis);
        v.extend_from_slice(&self.scale);
        v
    }

    pub fn param_count(spec: &CodecSpec) -> usize {
        match spec {
            CodecSpec::Pca { resolution, components } => {
                let d = resolution * resolution;
                d + components * d + components
            }
            _ => 0,
        }
    }

    pub fn from_parts(spec: CodecSpec, params: &[f64]) -> Result<Self> {
        let need = Self::param_count(&spec);
        if params.len() != need {
            return Err(Error::Checkpoint(format!("codec expects {need} values, got {}", params.len())));
        }
        match spec {
            CodecSpec::Pca { resolution, components } => {
                let d = resolution * resolution;
                Ok(LatentCodec {
                    spec,
                    mean: params[..d].to_vec(),
                    basis: params[d..d + components * d].to_vec(),
                    scale: params[d + components * d..].to_vec(),
                })
            }
            other => Ok(Self::fixed(other)),
        }
    }
}
