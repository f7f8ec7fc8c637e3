//! Latent denoising diffusion: schedule, forward noising, noise-prediction
//! training and ancestral sampling.

mod codec;
mod denoiser;
mod schedule;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::Stage;
use crate::error::{Error, Result};
use crate::nn::{mse_grad, Adam, AdamConfig, Module, Tensor};
use crate::raster::GrayImage;

pub use codec::{CodecSpec, LatentCodec};
pub use denoiser::{timestep_embedding, Denoiser, DenoiserCache};
pub use schedule::{diffusion_loss, diffusion_loss_grad, forward_diffuse, make_linear_schedule, NoiseSchedule};

const KIND: &str = "ldm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Number of diffusion steps `T`.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Checkpoints (and FID evaluations) every this many epochs.
    pub fid_interval: usize,
    pub seed: u64,
    pub widths: Vec<usize>,
    pub time_dim: usize,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            epochs: 1000,
            batch_size: 16,
            learning_rate: 2e-6,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            fid_interval: 50,
            seed: 0,
            widths: vec![256, 128, 64],
            time_dim: 32,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("steps", self.steps),
            ("fid_interval", self.fid_interval),
            ("time_dim", self.time_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Invalid("learning_rate must be positive".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Invalid("widths must be a nonempty list of positive sizes".into()));
        }
        make_linear_schedule(self.steps, self.beta_start, self.beta_end).map(|_| ())
    }

    /// Epochs at which checkpoints are emitted.
    pub fn checkpoint_epochs(&self) -> Vec<usize> {
        let v: Vec<usize> = (1..=self.epochs).filter(|e| e % self.fid_interval == 0).collect();
        if v.is_empty() {
            vec![self.epochs]
        } else {
            v
        }
    }
}

/// Everything needed to sample: schedule, codec, weights, and the
/// configuration that produced them.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    pub codec: LatentCodec,
    pub denoiser: Denoiser,
    pub config: DiffusionTrainConfig,
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct DiffusionRun {
    /// Mean training loss of each epoch.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<DiffusionModel>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    schedule: ScheduleMeta,
    codec: CodecSpec,
    codec_id: String,
    config: DiffusionTrainConfig,
    epoch: usize,
    latent_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct ScheduleMeta {
    kind: String,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
}

impl DiffusionModel {
    pub fn file_name(stage: Stage, epoch: usize) -> String {
        format!("ldm_{stage}_e{epoch}.ckpt")
    }

    /// Writes the checkpoint and returns its content hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let meta = Meta {
            schedule: ScheduleMeta {
                kind: "linear".into(),
                steps: self.config.steps,
                beta_start: self.config.beta_start,
                beta_end: self.config.beta_end,
            },
            codec: self.codec.spec().clone(),
            codec_id: self.codec.id(),
            config: self.config.clone(),
            epoch: self.epoch,
            latent_dim: self.codec.latent_dim(),
        };
        let mut params = self.codec.params();
        params.extend(self.denoiser.clone().flat_values());
        checkpoint::save(path, KIND, &meta, &params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params, _): (Meta, Vec<f64>, String) = checkpoint::load(path, KIND)?;
        let split = LatentCodec::param_count(&meta.codec);
        if params.len() < split {
            return Err(Error::Checkpoint("parameter blob shorter than codec".into()));
        }
        let codec = LatentCodec::from_parts(meta.codec, &params[..split])?;
        let schedule = make_linear_schedule(meta.schedule.steps, meta.schedule.beta_start, meta.schedule.beta_end)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut denoiser = Denoiser::new(meta.latent_dim, &meta.config.widths, meta.config.time_dim, &mut rng);
        denoiser.load_flat(&params[split..]).map_err(Error::Checkpoint)?;
        Ok(DiffusionModel {
            schedule,
            codec,
            denoiser,
            config: meta.config,
            epoch: meta.epoch,
        })
    }

    /// Ancestral sampling in latent space, `n` vectors.
    pub fn sample_latents(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        sample_latents(self, &self.schedule, n, seed)
    }

    /// Samples decoded images with pixels in `[0, 1]`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<GrayImage>> {
        sample_diffusion(self, &self.schedule, n, seed)
    }
}

/// Trains one denoiser on pre-encoded latents.
pub fn train_latent_diffusion(latents: &[Vec<f64>], codec: LatentCodec, config: &DiffusionTrainConfig) -> Result<DiffusionRun> {
    config.validate()?;
    if latents.is_empty() {
        return Err(Error::Empty("diffusion training set"));
    }
    let dim = codec.latent_dim();
    if let Some(bad) = latents.iter().find(|z| z.len() != dim) {
        return Err(Error::Shape {
            expected: vec![dim],
            actual: vec![bad.len()],
        });
    }
    let schedule = make_linear_schedule(config.steps, config.beta_start, config.beta_end)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut denoiser = Denoiser::new(dim, &config.widths, config.time_dim, &mut rng);
    let mut opt = Adam::new(AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    });
    let wanted = config.checkpoint_epochs();
    let sqrt_ab: Vec<f64> = schedule.alpha_bar.iter().map(|a| a.sqrt()).collect();
    let sqrt_1m: Vec<f64> = schedule.alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let b = batch.len();
            let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..config.steps)).collect();
            let eps = Tensor::randn(&[b, dim], &mut rng);
            let mut xt = vec![0.0; b * dim];
            for (r, &idx) in batch.iter().enumerate() {
                for j in 0..dim {
                    xt[r * dim + j] = sqrt_ab[t[r]] * latents[idx][j] + sqrt_1m[t[r]] * eps.data()[r * dim + j];
                }
            }
            let xt = Tensor::from_vec(&[b, dim], xt);
            let (pred, cache) = denoiser.forward(&xt, &t);
            total += diffusion_loss(pred.data(), eps.data())? * b as f64;
            denoiser.zero_grad();
            denoiser.backward(&cache, &mse_grad(&pred, &eps));
            opt.step(denoiser.params_mut());
        }
        losses.push(total / latents.len() as f64);
        if wanted.contains(&epoch) {
            checkpoints.push(DiffusionModel {
                schedule: schedule.clone(),
                codec: codec.clone(),
                denoiser: denoiser.clone(),
                config: config.clone(),
                epoch,
            });
        }
    }
    Ok(DiffusionRun { losses, checkpoints })
}

/// Encodes `images` with `codec` and trains on the latents.
pub fn train_diffusion(images: &[GrayImage], codec: LatentCodec, config: &DiffusionTrainConfig) -> Result<DiffusionRun> {
    if images.is_empty() {
        return Err(Error::Empty("diffusion training set"));
    }
    let latents = images.iter().map(|i| codec.encode(i)).collect::<Result<Vec<_>>>()?;
    train_latent_diffusion(&latents, codec, config)
}

const SAMPLE_CHUNK: usize = 256;

/// Reverse process from `T-1` down to `0` with posterior-variance noise.
pub fn sample_latents(model: &DiffusionModel, schedule: &NoiseSchedule, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let dim = model.codec.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut remaining = n;
    while remaining > 0 {
        let b = remaining.min(SAMPLE_CHUNK);
        remaining -= b;
        let mut x = Tensor::randn(&[b, dim], &mut rng);
        for t in (0..schedule.steps()).rev() {
            let eps = model.denoiser.predict(&x, &vec![t; b]);
            let coef = schedule.beta[t] / (1.0 - schedule.alpha_bar[t]).sqrt();
            let inv = 1.0 / schedule.alpha[t].sqrt();
            let sigma = schedule.posterior_variance(t).sqrt();
            for (xv, e) in x.data_mut().iter_mut().zip(eps.data()) {
                *xv = inv * (*xv - coef * e);
                if t > 0 {
                    *xv += sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        out.extend(x.data().chunks(dim).map(|c| c.to_vec()));
    }
    out
}

pub fn sample_diffusion(model: &DiffusionModel, schedule: &NoiseSchedule, n: usize, seed: u64) -> Result<Vec<GrayImage>> {
    if n == 0 {
        return Err(Error::Invalid("sample count must be at least 1".into()));
    }
    sample_latents(model, schedule, n, seed)
        .iter()
        .map(|z| model.codec.decode(z))
        .collect()
}
