use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Layer, Sequential, Tensor};
use crate::raster::GrayImage;

pub const TOY_POOL_ID: &str = "toy-pool";
pub const INCEPTION_ID: &str = "inception-2048";

const TOY_POOL_SEED: u64 = 0x7059_706f_6f6c;
const TOY_POOL_RES: usize = 32;
const TOY_POOL_DIM: usize = 64;
const TOY_POOL_SCALE: f64 = 10.0;

pub trait FeatureExtractor {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, images: &[GrayImage]) -> Vec<Vec<f64>>;
}

/// Fixed, seeded random convolutions over pixels mapped to `[-1, 1]`:
/// three conv/ReLU/2×2-pool blocks reduce a 32×32 image to a 4×4 grid of
/// four channels, flattened to 64 features (scaled by 10) that keep coarse
/// layout.
#[derive(Debug, Clone)]
pub struct ToyPool {
    net: Sequential,
}

impl Default for ToyPool {
    fn default() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TOY_POOL_SEED);
        ToyPool {
            net: Sequential::new(vec![
                Layer::Conv(Conv2d::new(1, 8, 5, 2f64.sqrt(), &mut rng)),
                Layer::Relu,
                Layer::AvgPool2,
                Layer::Conv(Conv2d::new(8, 16, 3, 2f64.sqrt(), &mut rng)),
                Layer::Relu,
                Layer::AvgPool2,
                Layer::Conv(Conv2d::new(16, 4, 3, 2f64.sqrt(), &mut rng)),
                Layer::Relu,
                Layer::AvgPool2,
                Layer::Flatten,
            ]),
        }
    }
}

impl FeatureExtractor for ToyPool {
    fn id(&self) -> &str {
        TOY_POOL_ID
    }

    fn dim(&self) -> usize {
        TOY_POOL_DIM
    }

    fn embed(&self, images: &[GrayImage]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let mut data = Vec::with_capacity(chunk.len() * TOY_POOL_RES * TOY_POOL_RES);
            for img in chunk {
                let px = if img.width() == TOY_POOL_RES && img.height() == TOY_POOL_RES {
                    img.pixels().to_vec()
                } else {
                    img.resize(TOY_POOL_RES, TOY_POOL_RES).into_pixels()
                };
                data.extend(px.iter().map(|v| 2.0 * v - 1.0));
            }
            let x = Tensor::from_vec(&[chunk.len(), 1, TOY_POOL_RES, TOY_POOL_RES], data);
            let y = self.net.infer(&x);
            out.extend(
                y.data()
                    .chunks(TOY_POOL_DIM)
                    .map(|r| r.iter().map(|v| v * TOY_POOL_SCALE).collect()),
            );
        }
        out
    }
}

/// One feature row per image for the registered extractor `id`.
pub fn embed_images(images: &[GrayImage], id: &str) -> Result<Vec<Vec<f64>>> {
    match id {
        TOY_POOL_ID => Ok(ToyPool::default().embed(images)),
        INCEPTION_ID => Err(Error::ExtractorUnavailable {
            id: id.into(),
            reason: "network weights are not provisioned in this build".into(),
        }),
        other => Err(Error::UnknownExtractor(other.into())),
    }
}
