//! Style-based adversarial generator with non-saturating logistic losses
//! and R1 gradient regularization.

mod augment;
mod generator;

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::Stage;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softplus, Adam, AdamConfig, Conv2d, Layer, Linear, Module, Sequential, Tensor};
use crate::raster::GrayImage;

pub use augment::{augment, augment_backward, Augment};
pub use generator::{map_latent, pixel_norm, Generator, GeneratorCache, Mapping, StyleConv};

const KIND: &str = "gan";
const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanInit {
    #[default]
    Scratch,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    /// R1 weight `gamma`.
    pub r1_weight: f64,
    /// Apply R1 every this many discriminator steps, scaled up to match.
    pub r1_interval: usize,
    pub augmentation: bool,
    pub init: GanInit,
    pub pretrained_path: Option<PathBuf>,
    pub seed: u64,
    pub resolution: usize,
    pub latent_dim: usize,
    pub mapping_layers: usize,
    /// Generator channels per level, from 4×4 upward.
    pub channels: Vec<usize>,
    /// Discriminator channels per downsampling level.
    pub disc_channels: Vec<usize>,
    pub checkpoint_interval: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            steps: 1500,
            batch_size: 16,
            lr_generator: 0.002,
            lr_discriminator: 0.002,
            r1_weight: 10.0,
            r1_interval: 1,
            augmentation: true,
            init: GanInit::Scratch,
            pretrained_path: None,
            seed: 0,
            resolution: 64,
            latent_dim: 128,
            mapping_layers: 4,
            channels: vec![128, 128, 64, 32, 16],
            disc_channels: vec![16, 32, 64, 128],
            checkpoint_interval: 100,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("r1_interval", self.r1_interval),
            ("latent_dim", self.latent_dim),
            ("mapping_layers", self.mapping_layers),
            ("checkpoint_interval", self.checkpoint_interval),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return Err(Error::Invalid("learning rates must be positive".into()));
        }
        if !(self.r1_weight >= 0.0) {
            return Err(Error::Invalid("r1_weight must be nonnegative".into()));
        }
        if self.channels.is_empty() || self.disc_channels.is_empty() {
            return Err(Error::Invalid("channel lists must be nonempty".into()));
        }
        let g_res = 4usize << (self.channels.len() - 1);
        let d_res = 4usize << self.disc_channels.len();
        if g_res != self.resolution || d_res != self.resolution {
            return Err(Error::Invalid(format!(
                "resolution {} needs {} generator levels and {} discriminator levels",
                self.resolution,
                self.resolution.trailing_zeros().saturating_sub(1),
                self.resolution.trailing_zeros().saturating_sub(2)
            )));
        }
        if self.init == GanInit::Pretrained && self.pretrained_path.is_none() {
            return Err(Error::Invalid("init = pretrained requires pretrained_path".into()));
        }
        Ok(())
    }

    pub fn checkpoint_steps(&self) -> Vec<usize> {
        let v: Vec<usize> = (1..=self.steps).filter(|s| s % self.checkpoint_interval == 0).collect();
        if v.is_empty() {
            vec![self.steps]
        } else {
            v
        }
    }
}

/// Mean `softplus(-l)` over fake logits.
pub fn generator_loss(fake_logits: &[f64]) -> f64 {
    fake_logits.iter().map(|&l| softplus(-l)).sum::<f64>() / fake_logits.len() as f64
}

/// Mean `softplus(-l_real)` plus mean `softplus(l_fake)`.
pub fn discriminator_loss(real_logits: &[f64], fake_logits: &[f64]) -> f64 {
    real_logits.iter().map(|&l| softplus(-l)).sum::<f64>() / real_logits.len() as f64
        + fake_logits.iter().map(|&l| softplus(l)).sum::<f64>() / fake_logits.len() as f64
}

/// `(gamma / 2)` times the batch mean of squared per-image gradient norms.
/// The leading axis of `grad_real` is the batch.
pub fn r1_penalty(grad_real: &Tensor, gamma: f64) -> f64 {
    let n = grad_real.batch();
    let total: f64 = (0..n).map(|i| grad_real.item(i).iter().map(|g| g * g).sum::<f64>()).sum();
    gamma / 2.0 * total / n as f64
}

/// Adds the parameter gradient of the R1 penalty at `reals` into `disc` and
/// returns the penalty. The second-order term is a central difference of
/// parameter gradients along the input-gradient direction.
pub fn r1_accumulate(disc: &mut Sequential, reals: &Tensor, gamma: f64) -> f64 {
    let n = reals.batch();
    let mut probe = disc.clone();
    let (logits, trace) = probe.forward(reals);
    let g = probe.backward(&trace, &Tensor::full(logits.shape(), 1.0));
    let penalty = r1_penalty(&g, gamma);
    let scale = g.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if gamma == 0.0 || scale == 0.0 {
        return penalty;
    }
    let eps = 1e-4 / scale;
    let grads_at = |probe: &mut Sequential, sign: f64| -> Vec<f64> {
        let x = reals.zip_map(&g, |a, b| a + sign * eps * b);
        probe.zero_grad();
        let (l, tr) = probe.forward(&x);
        probe.backward(&tr, &Tensor::full(l.shape(), 1.0));
        probe.flat_grads()
    };
    let plus = grads_at(&mut probe, 1.0);
    let minus = grads_at(&mut probe, -1.0);
    let coef = gamma / n as f64 / (2.0 * eps);
    let mut off = 0;
    for p in disc.params_mut() {
        p.zero_grad_if_unset();
        for (j, gv) in p.grad.iter_mut().enumerate() {
            *gv += coef * (plus[off + j] - minus[off + j]);
        }
        off += p.len();
    }
    penalty
}

/// Convolutional critic: `[n, 1, res, res]` to `[n, 1]` logits.
pub fn build_discriminator<R: rand::Rng + ?Sized>(disc_channels: &[usize], rng: &mut R) -> Sequential {
    let mut layers = Vec::new();
    let mut prev = 1;
    for (i, &c) in disc_channels.iter().enumerate() {
        if i == 0 {
            layers.push(Layer::Conv(Conv2d::new(1, c, 3, 1.0, rng)));
            layers.push(Layer::LeakyRelu(SLOPE));
            prev = c;
        }
        layers.push(Layer::Conv(Conv2d::new(prev, c, 3, 1.0, rng)));
        layers.push(Layer::LeakyRelu(SLOPE));
        layers.push(Layer::AvgPool2);
        prev = c;
    }
    layers.push(Layer::Flatten);
    layers.push(Layer::Linear(Linear::new(prev * 16, prev, 1.0, rng)));
    layers.push(Layer::LeakyRelu(SLOPE));
    layers.push(Layer::Linear(Linear::new(prev, 1, 1.0, rng)));
    Sequential::new(layers)
}

/// Generator, discriminator and the step they were taken at.
#[derive(Debug, Clone)]
pub struct GanModel {
    pub config: GanTrainConfig,
    pub generator: Generator,
    pub discriminator: Sequential,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: GanTrainConfig,
    step: usize,
    generator_params: usize,
}

fn fresh(config: &GanTrainConfig, rng: &mut ChaCha8Rng) -> (Generator, Sequential) {
    let g = Generator::new(config.latent_dim, config.mapping_layers, &config.channels, rng);
    let d = build_discriminator(&config.disc_channels, rng);
    (g, d)
}

fn to_signed(img: &GrayImage, res: usize) -> Vec<f64> {
    let img = if img.width() == res && img.height() == res {
        img.clone()
    } else {
        img.resize(res, res)
    };
    img.pixels().iter().map(|v| 2.0 * v - 1.0).collect()
}

impl GanModel {
    pub fn file_name(stage: Stage, step: usize) -> String {
        format!("gan_{stage}_s{step}.ckpt")
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let mut g = self.generator.clone();
        let mut params = g.flat_values();
        let meta = Meta {
            config: self.config.clone(),
            step: self.step,
            generator_params: params.len(),
        };
        params.extend(self.discriminator.clone().flat_values());
        checkpoint::save(path, KIND, &meta, &params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params, _): (Meta, Vec<f64>, String) = checkpoint::load(path, KIND)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut generator, mut discriminator) = fresh(&meta.config, &mut rng);
        if meta.generator_params > params.len() {
            return Err(Error::Checkpoint("generator block exceeds blob".into()));
        }
        generator
            .load_flat(&params[..meta.generator_params])
            .map_err(Error::Checkpoint)?;
        discriminator
            .load_flat(&params[meta.generator_params..])
            .map_err(Error::Checkpoint)?;
        Ok(GanModel {
            config: meta.config,
            generator,
            discriminator,
            step: meta.step,
        })
    }

    /// `n` images at the configured resolution, pixels in `[0, 1]`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<GrayImage>> {
        sample_gan(self, n, seed)
    }
}

pub fn sample_gan(model: &GanModel, n: usize, seed: u64) -> Result<Vec<GrayImage>> {
    if n == 0 {
        return Err(Error::Invalid("sample count must be at least 1".into()));
    }
    let res = model.generator.resolution();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut remaining = n;
    while remaining > 0 {
        let b = remaining.min(64);
        remaining -= b;
        let z = Tensor::randn(&[b, model.config.latent_dim], &mut rng);
        let (x, _) = model.generator.forward(&z, &mut rng);
        for i in 0..b {
            let px = x.item(i).iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
            out.push(GrayImage::from_vec(res, res, px)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub d_loss: f64,
    pub g_loss: f64,
    pub r1: Option<f64>,
}

/// Alternating discriminator/generator optimisation over one image set.
pub struct GanTrainer {
    pub config: GanTrainConfig,
    pub generator: Generator,
    pub discriminator: Sequential,
    pub opt_g: Adam,
    pub opt_d: Adam,
    reals: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
    step: usize,
}

impl GanTrainer {
    pub fn new(images: &[GrayImage], config: &GanTrainConfig) -> Result<Self> {
        config.validate()?;
        if images.is_empty() {
            return Err(Error::Empty("adversarial training set"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (mut generator, mut discriminator) = fresh(config, &mut rng);
        if config.init == GanInit::Pretrained {
            let path = config.pretrained_path.clone().expect("validated");
            if !path.exists() {
                return Err(Error::MissingWeights(path));
            }
            let pre = GanModel::load(&path)?;
            if pre.config.channels != config.channels
                || pre.config.disc_channels != config.disc_channels
                || pre.config.latent_dim != config.latent_dim
                || pre.config.mapping_layers != config.mapping_layers
            {
                return Err(Error::Checkpoint(format!(
                    "pretrained weights at {} have an incompatible architecture",
                    path.display()
                )));
            }
            generator = pre.generator;
            discriminator = pre.discriminator;
        }
        let adam = |lr: f64| {
            Adam::new(AdamConfig {
                lr,
                beta1: config.adam_beta1,
                beta2: config.adam_beta2,
                ..AdamConfig::default()
            })
        };
        Ok(GanTrainer {
            config: config.clone(),
            generator,
            discriminator,
            opt_g: adam(config.lr_generator),
            opt_d: adam(config.lr_discriminator),
            reals: images.iter().map(|i| to_signed(i, config.resolution)).collect(),
            rng,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn plans(&mut self, n: usize) -> Vec<Augment> {
        if self.config.augmentation {
            let shift = (self.config.resolution / 16).max(1) as isize;
            (0..n).map(|_| Augment::random(shift, &mut self.rng)).collect()
        } else {
            vec![Augment::NONE; n]
        }
    }

    pub fn step(&mut self) -> StepStats {
        self.step += 1;
        let res = self.config.resolution;
        let b = self.config.batch_size.min(self.reals.len());
        let zd = self.config.latent_dim;

        let picks = index::sample(&mut self.rng, self.reals.len(), b).into_vec();
        let mut real = Vec::with_capacity(b * res * res);
        for &i in &picks {
            real.extend_from_slice(&self.reals[i]);
        }
        let real = Tensor::from_vec(&[b, 1, res, res], real);
        let z = Tensor::randn(&[b, zd], &mut self.rng);
        let (fake, _) = self.generator.forward(&z, &mut self.rng);
        let plans = self.plans(b);
        let real_a = augment(&real, &plans);
        let plans = self.plans(b);
        let fake_a = augment(&fake, &plans);
        let mut both = real_a.data().to_vec();
        both.extend_from_slice(fake_a.data());
        let both = Tensor::from_vec(&[2 * b, 1, res, res], both);
        let (logits, trace) = self.discriminator.forward(&both);
        let (lr, lf) = logits.data().split_at(b);
        let d_loss = discriminator_loss(lr, lf);
        let mut gl = Vec::with_capacity(2 * b);
        gl.extend(lr.iter().map(|&l| -sigmoid(-l) / b as f64));
        gl.extend(lf.iter().map(|&l| sigmoid(l) / b as f64));
        self.discriminator.zero_grad();
        self.discriminator.backward(&trace, &Tensor::from_vec(logits.shape(), gl));
        let r1 = if self.config.r1_weight > 0.0 && self.step % self.config.r1_interval == 0 {
            let gamma = self.config.r1_weight * self.config.r1_interval as f64;
            Some(r1_accumulate(&mut self.discriminator, &real_a, gamma) / self.config.r1_interval as f64)
        } else {
            None
        };
        self.opt_d.step(self.discriminator.params_mut());

        let z = Tensor::randn(&[b, zd], &mut self.rng);
        let (fake, gcache) = self.generator.forward(&z, &mut self.rng);
        let plans = self.plans(b);
        let fake_a = augment(&fake, &plans);
        let (logits, trace) = self.discriminator.forward(&fake_a);
        let g_loss = generator_loss(logits.data());
        let gl = logits.map(|l| -sigmoid(-l) / b as f64);
        let gx = self.discriminator.backward(&trace, &gl);
        self.discriminator.zero_grad();
        let g_fake = augment_backward(&gx, &plans);
        self.generator.zero_grad();
        self.generator.backward(&gcache, &g_fake);
        self.opt_g.step(self.generator.params_mut());

        StepStats { d_loss, g_loss, r1 }
    }

    pub fn snapshot(&self) -> GanModel {
        GanModel {
            config: self.config.clone(),
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            step: self.step,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GanRun {
    pub stats: Vec<StepStats>,
    pub checkpoints: Vec<GanModel>,
}

/// Runs `config.steps` updates, snapshotting every `checkpoint_interval`.
pub fn train_gan(images: &[GrayImage], config: &GanTrainConfig) -> Result<GanRun> {
    let mut trainer = GanTrainer::new(images, config)?;
    let wanted = config.checkpoint_steps();
    let mut stats = Vec::with_capacity(config.steps);
    let mut checkpoints = Vec::new();
    for _ in 0..config.steps {
        stats.push(trainer.step());
        if wanted.contains(&trainer.steps_done()) {
            checkpoints.push(trainer.snapshot());
        }
    }
    Ok(GanRun { stats, checkpoints })
}

#[cfg(test)]
mod tests;
