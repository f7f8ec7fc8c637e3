use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::Stage;
use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy, Adam, AdamConfig, Attention, Conv2d, Layer, LayerNorm, Linear, Module, PatchEmbed,
    ReduceOnPlateau, Sequential, Tensor,
};
use crate::raster::GrayImage;

use super::metrics::{Confusion, MetricsReport};

const KIND: &str = "classifier";
const CLASSES: usize = 5;
const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierFamily {
    #[default]
    ConvSmall,
    ConvResidual,
    AttentionPatch,
}

impl ClassifierFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierFamily::ConvSmall => "conv_small",
            ClassifierFamily::ConvResidual => "conv_residual",
            ClassifierFamily::AttentionPatch => "attention_patch",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInit {
    #[default]
    Scratch,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub family: ClassifierFamily,
    pub init: ClassifierInit,
    /// Classifier checkpoint whose weights seed a `pretrained` run.
    pub pretrained_path: Option<PathBuf>,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub input_resolution: usize,
    /// Base channel count (convolutional) or token width (attention).
    pub width: usize,
    pub validation_fraction: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            family: ClassifierFamily::ConvSmall,
            init: ClassifierInit::Scratch,
            pretrained_path: None,
            batch_size: 32,
            learning_rate: 1e-4,
            patience_epochs: 30,
            max_epochs: 500,
            input_resolution: 224,
            width: 16,
            validation_fraction: 0.1,
            lr_factor: 0.1,
            lr_patience: 10,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.patience_epochs < 1 {
            return bad("patience_epochs must be at least 1".into());
        }
        if self.input_resolution < 32 {
            return bad(format!("input_resolution {} < 32", self.input_resolution));
        }
        if self.input_resolution % 8 != 0 {
            return bad(format!("input_resolution {} is not a multiple of 8", self.input_resolution));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.width == 0 {
            return bad("batch_size, max_epochs and width must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation_fraction {} outside (0, 1)", self.validation_fraction));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad(format!("lr_factor {} outside (0, 1]", self.lr_factor));
        }
        if self.init == ClassifierInit::Pretrained && self.pretrained_path.is_none() {
            return bad("pretrained init needs pretrained_path".into());
        }
        Ok(())
    }

    /// Fields that fix the network layout.
    fn same_architecture(&self, other: &ClassifierConfig) -> bool {
        self.family == other.family && self.input_resolution == other.input_resolution && self.width == other.width
    }
}

pub fn build_network<R: rand::Rng + ?Sized>(config: &ClassifierConfig, rng: &mut R) -> Sequential {
    let w = config.width;
    let relu_gain = 2f64.sqrt();
    let conv = |i, o, g, rng: &mut R| Layer::Conv(Conv2d::new(i, o, 3, g, rng));
    match config.family {
        ClassifierFamily::ConvSmall => Sequential::new(vec![
            conv(1, w, relu_gain, rng),
            Layer::Relu,
            Layer::AvgPool2,
            conv(w, 2 * w, relu_gain, rng),
            Layer::Relu,
            Layer::AvgPool2,
            conv(2 * w, 4 * w, relu_gain, rng),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Linear(Linear::new(4 * w, CLASSES, 1.0, rng)),
        ]),
        ClassifierFamily::ConvResidual => {
            let block = |c, rng: &mut R| {
                Layer::Residual(Sequential::new(vec![
                    conv(c, c, relu_gain, rng),
                    Layer::Relu,
                    conv(c, c, 0.5, rng),
                ]))
            };
            Sequential::new(vec![
                conv(1, w, relu_gain, rng),
                Layer::Relu,
                Layer::AvgPool2,
                block(w, rng),
                Layer::Relu,
                Layer::AvgPool2,
                conv(w, 2 * w, relu_gain, rng),
                Layer::Relu,
                block(2 * w, rng),
                Layer::Relu,
                Layer::GlobalAvgPool,
                Layer::Linear(Linear::new(2 * w, CLASSES, 1.0, rng)),
            ])
        }
        ClassifierFamily::AttentionPatch => {
            let d = 2 * w;
            let patch = config.input_resolution / 8;
            Sequential::new(vec![
                Layer::PatchEmbed(PatchEmbed::new(1, config.input_resolution, patch, d, rng)),
                Layer::Residual(Sequential::new(vec![
                    Layer::LayerNorm(LayerNorm::new(d)),
                    Layer::Attention(Attention::new(d, rng)),
                ])),
                Layer::Residual(Sequential::new(vec![
                    Layer::LayerNorm(LayerNorm::new(d)),
                    Layer::Linear(Linear::new(d, 2 * d, 1.0, rng)),
                    Layer::Silu,
                    Layer::Linear(Linear::new(2 * d, d, 0.5, rng)),
                ])),
                Layer::LayerNorm(LayerNorm::new(d)),
                Layer::TokenMean,
                Layer::Linear(Linear::new(d, CLASSES, 1.0, rng)),
            ])
        }
    }
}

/// Pixel mean and standard deviation of a training mix after resizing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats { mean: 0.0, std: 1.0 };

    /// Population statistics over every pixel; a flat mix gets `std = 1`.
    pub fn fit(images: &[GrayImage], resolution: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("normalization images"));
        }
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0usize;
        for img in images {
            let img = resized(img, resolution);
            for &v in img.pixels() {
                sum += v;
                sq += v * v;
            }
            n += img.pixels().len();
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
        Ok(NormStats { mean, std })
    }
}

fn resized(img: &GrayImage, resolution: usize) -> GrayImage {
    if img.width() == resolution && img.height() == resolution {
        img.clone()
    } else {
        img.resize(resolution, resolution)
    }
}

/// Resize to `resolution` square and standardise with `stats`.
pub fn preprocess(image: &GrayImage, resolution: usize, stats: NormStats) -> GrayImage {
    let mut img = resized(image, resolution);
    for v in img.pixels_mut() {
        *v = (*v - stats.mean) / stats.std;
    }
    img
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: GrayImage,
    pub stage: Stage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience rule on a monitored loss. Epochs are counted from 1.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.epoch += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epoch;
            return StopDecision::Improved;
        }
        if self.epoch - self.best_epoch >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
    /// Epoch (from 1) of the returned snapshot.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub norm: NormStats,
    pub train_size: usize,
    pub validation_size: usize,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub norm: NormStats,
    pub net: Sequential,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ClassifierConfig,
    norm: NormStats,
}

impl Classifier {
    pub fn new(config: ClassifierConfig, norm: NormStats) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = build_network(&config, &mut rng);
        Ok(Classifier { config, norm, net })
    }

    fn batch_tensor(&self, images: &[&GrayImage]) -> Tensor {
        let res = self.config.input_resolution;
        let items: Vec<GrayImage> = images.iter().map(|i| preprocess(i, res, self.norm)).collect();
        let slices: Vec<&[f64]> = items.iter().map(|i| i.pixels()).collect();
        Tensor::stack(&slices, &[1, res, res])
    }

    /// Raw class scores, one row of five per image.
    pub fn logits(&self, images: &[GrayImage]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_BATCH) {
            let refs: Vec<&GrayImage> = chunk.iter().collect();
            let y = self.net.infer(&self.batch_tensor(&refs));
            out.extend((0..y.batch()).map(|i| y.item(i).to_vec()));
        }
        out
    }

    pub fn predict(&self, images: &[GrayImage]) -> Vec<Stage> {
        self.logits(images)
            .iter()
            .map(|row| Stage::from_ordinal(argmax(row)).expect("five logits"))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let meta = Meta {
            config: self.config.clone(),
            norm: self.norm,
        };
        checkpoint::save(path, KIND, &meta, &self.net.clone().flat_values())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params, _): (Meta, Vec<f64>, String) = checkpoint::load(path, KIND)?;
        let mut c = Classifier::new(meta.config, meta.norm)?;
        c.net.load_flat(&params).map_err(Error::Checkpoint)?;
        Ok(c)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-stage holdout of `fraction` (rounded, at least one when a stage has
/// two or more examples). Returns `(train, validation)` indices.
pub fn stratified_holdout(stages: &[Stage], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for stage in Stage::ALL {
        let mut idx: Vec<usize> = (0..stages.len()).filter(|&i| stages[i] == stage).collect();
        idx.shuffle(rng);
        let n_val = if idx.len() < 2 {
            0
        } else {
            ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1)
        };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn mean_loss(net: &Sequential, x: &[Vec<f64>], labels: &[usize], res: usize) -> f64 {
    let mut total = 0.0;
    for (xs, ls) in x.chunks(EVAL_BATCH).zip(labels.chunks(EVAL_BATCH)) {
        let slices: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let y = net.infer(&Tensor::stack(&slices, &[1, res, res]));
        total += cross_entropy(&y, ls).0 * ls.len() as f64;
    }
    total / labels.len() as f64
}

/// Cross-entropy training with a stratified validation holdout, plateau
/// learning-rate decay and early stopping. Returns the lowest
/// validation-loss snapshot.
pub fn train_classifier(examples: &[Example], config: &ClassifierConfig) -> Result<(Classifier, TrainHistory)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("training mix"));
    }
    let res = config.input_resolution;
    let images: Vec<GrayImage> = examples.iter().map(|e| e.image.clone()).collect();
    let norm = NormStats::fit(&images, res)?;
    let mut model = Classifier::new(config.clone(), norm)?;
    if config.init == ClassifierInit::Pretrained {
        let path = config.pretrained_path.as_ref().expect("validated");
        if !path.exists() {
            return Err(Error::MissingWeights(path.clone()));
        }
        let base = Classifier::load(path)?;
        if !base.config.same_architecture(config) {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} network at {} px, width {}",
                path.display(),
                base.config.family.as_str(),
                base.config.input_resolution,
                base.config.width
            )));
        }
        model.net = base.net;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_C1A5);
    let stages: Vec<Stage> = examples.iter().map(|e| e.stage).collect();
    let (train_idx, val_idx) = stratified_holdout(&stages, config.validation_fraction, &mut rng);
    if val_idx.is_empty() {
        return Err(Error::Invalid("training mix too small for a validation holdout".into()));
    }
    let inputs: Vec<Vec<f64>> = images.iter().map(|i| preprocess(i, res, norm).into_pixels()).collect();
    let labels: Vec<usize> = stages.iter().map(|s| s.ordinal()).collect();
    let val_x: Vec<Vec<f64>> = val_idx.iter().map(|&i| inputs[i].clone()).collect();
    let val_y: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut opt = Adam::new(AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    });
    let mut plateau = ReduceOnPlateau::new(config.lr_factor, config.lr_patience);
    let mut stopper = EarlyStopping::new(config.patience_epochs);
    let mut lr = config.learning_rate;
    let mut best_net = model.net.clone();
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        learning_rate: Vec::new(),
        best_epoch: 0,
        stopped_epoch: 0,
        norm,
        train_size: train_idx.len(),
        validation_size: val_idx.len(),
    };
    let mut order = train_idx.clone();
    for _ in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let slices: Vec<&[f64]> = batch.iter().map(|&i| inputs[i].as_slice()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let x = Tensor::stack(&slices, &[1, res, res]);
            model.net.zero_grad();
            let (logits, trace) = model.net.forward(&x);
            let (loss, gy) = cross_entropy(&logits, &ys);
            model.net.backward(&trace, &gy);
            opt.config.lr = lr;
            opt.step(model.net.params_mut());
            epoch_loss += loss * batch.len() as f64;
        }
        history.train_loss.push(epoch_loss / order.len().max(1) as f64);
        history.learning_rate.push(lr);
        let val_loss = mean_loss(&model.net, &val_x, &val_y, res);
        history.val_loss.push(val_loss);
        let decision = stopper.observe(val_loss);
        if decision == StopDecision::Improved {
            best_net = model.net.clone();
        }
        plateau.observe(val_loss, &mut lr);
        if decision == StopDecision::Stop {
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    history.stopped_epoch = history.val_loss.len();
    model.net = best_net;
    Ok((model, history))
}

pub fn evaluate(model: &Classifier, test: &[Example]) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let images: Vec<GrayImage> = test.iter().map(|e| e.image.clone()).collect();
    let predicted = model.predict(&images);
    let truth: Vec<Stage> = test.iter().map(|e| e.stage).collect();
    let confusion = Confusion::from_stages(&truth, &predicted)?;
    Ok(MetricsReport::from_confusion(confusion, vec![model.config.seed]))
}
