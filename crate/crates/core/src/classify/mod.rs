//! Stage classification on real/synthetic training mixes.
//!
//! A [`MixSpec`] names how many real, adversarial and diffusion images per
//! stage go into one training set; [`build_mix`] draws them, and
//! [`train_classifier`] fits one of three network families with early
//! stopping on a stratified validation holdout. [`evaluate`] produces a
//! [`MetricsReport`]; [`aggregate_seeds`] summarises repeated runs with
//! normal-approximation intervals, and [`run_grid`] sweeps a list of mixes.

mod grid;
mod metrics;
mod model;

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, ImageRecord, Source, Split, Stage};
use crate::error::{Error, Result};
use crate::raster::GrayImage;

pub use grid::{
    read_grid_csv, run_grid, write_aggregated_csv, write_grid_csv, AggregatedRow, GridOptions, GridRow,
    ReportBundle, TestSet,
};
pub use metrics::{
    aggregate_seeds, class_scores, confidence_interval, f1_micro, macro_scores, mcc_multiclass, AggregatedReport,
    ClassScores, Confusion, Metric, MetricSummary, MetricsReport,
};
pub use model::{
    argmax, build_network, evaluate, preprocess, stratified_holdout, train_classifier, Classifier,
    ClassifierConfig, ClassifierFamily, ClassifierInit, EarlyStopping, Example, NormStats, StopDecision,
    TrainHistory,
};

/// Images per stage drawn from each pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub real_n: usize,
    pub gan_n: usize,
    pub ldm_n: usize,
}

impl MixSpec {
    pub const fn new(real_n: usize, gan_n: usize, ldm_n: usize) -> Self {
        MixSpec { real_n, gan_n, ldm_n }
    }

    pub fn per_stage(&self) -> usize {
        self.real_n + self.gan_n + self.ldm_n
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_stage() == 0 {
            return Err(Error::Invalid("mix must request at least one image".into()));
        }
        Ok(())
    }

    /// `(real_n, k, k)` for every `k`.
    pub fn ladder(real_n: usize, ks: &[usize]) -> Vec<MixSpec> {
        ks.iter().map(|&k| MixSpec::new(real_n, k, k)).collect()
    }
}

/// Candidate images for mixing, one manifest per origin.
#[derive(Debug, Clone)]
pub struct MixPools {
    pub real: DatasetManifest,
    pub gan: DatasetManifest,
    pub ldm: DatasetManifest,
}

/// Draws a class-balanced training manifest: per stage, `spec` counts are
/// sampled without replacement from each pool. Real images come only from
/// sequences that have no test-split record.
pub fn build_mix(pools: &MixPools, spec: MixSpec, seed: u64) -> Result<DatasetManifest> {
    spec.validate()?;
    let test_sequences: BTreeSet<&str> = pools
        .real
        .records()
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| r.sequence_id.as_str())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<ImageRecord> = Vec::with_capacity(spec.per_stage() * Stage::ALL.len());
    let plan: [(&str, &DatasetManifest, usize, Option<Source>); 3] = [
        ("real", &pools.real, spec.real_n, None),
        ("gan", &pools.gan, spec.gan_n, Some(Source::SyntheticGan)),
        ("ldm", &pools.ldm, spec.ldm_n, Some(Source::SyntheticLdm)),
    ];
    for stage in Stage::ALL {
        for (name, pool, needed, expected) in plan {
            if needed == 0 {
                continue;
            }
            let candidates: Vec<&ImageRecord> = pool
                .of_stage(stage)
                .into_iter()
                .filter(|r| match expected {
                    Some(source) => r.source == source,
                    None => {
                        !r.source.is_synthetic()
                            && r.split != Split::Test
                            && !test_sequences.contains(r.sequence_id.as_str())
                    }
                })
                .collect();
            if candidates.len() < needed {
                return Err(Error::InsufficientPool {
                    source_kind: name.into(),
                    stage,
                    needed,
                    available: candidates.len(),
                });
            }
            let mut picked = index::sample(&mut rng, candidates.len(), needed).into_vec();
            picked.sort_unstable();
            for i in picked {
                let mut rec = candidates[i].clone();
                rec.split = Split::Train;
                out.push(rec);
            }
        }
    }
    DatasetManifest::new(
        out,
        format!("mix real={} gan={} ldm={} seed={seed}", spec.real_n, spec.gan_n, spec.ldm_n),
    )
}

/// Resolves manifest records to pixels.
pub trait ImageLoader {
    fn load(&self, record: &ImageRecord) -> Result<GrayImage>;
}

/// PNG files addressed by record path relative to a root directory.
#[derive(Debug, Clone)]
pub struct DirLoader {
    pub root: PathBuf,
}

impl ImageLoader for DirLoader {
    fn load(&self, record: &ImageRecord) -> Result<GrayImage> {
        GrayImage::load_png(&self.root.join(&record.path))
    }
}

/// In-memory images keyed by `image_id`.
impl ImageLoader for HashMap<String, GrayImage> {
    fn load(&self, record: &ImageRecord) -> Result<GrayImage> {
        self.get(&record.image_id)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("no image loaded for {}", record.image_id)))
    }
}

pub fn load_examples(manifest: &DatasetManifest, loader: &dyn ImageLoader) -> Result<Vec<Example>> {
    manifest
        .records()
        .iter()
        .map(|r| {
            Ok(Example {
                image: loader.load(r)?,
                stage: r.stage,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
