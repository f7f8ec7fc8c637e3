use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetManifest, ImageRecord, Source, Stage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrueSource {
    Real,
    Gan,
    Ldm,
}

impl TrueSource {
    pub const ALL: [TrueSource; 3] = [TrueSource::Real, TrueSource::Gan, TrueSource::Ldm];

    pub fn as_str(self) -> &'static str {
        match self {
            TrueSource::Real => "real",
            TrueSource::Gan => "gan",
            TrueSource::Ldm => "ldm",
        }
    }

    pub fn is_synthetic(self) -> bool {
        self != TrueSource::Real
    }
}

impl std::fmt::Display for TrueSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TrueSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrueSource::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown source `{s}`")))
    }
}

/// Required number of pool items per `(stage, source)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quota {
    counts: BTreeMap<Stage, BTreeMap<TrueSource, usize>>,
}

impl Quota {
    pub fn empty() -> Self {
        Quota { counts: BTreeMap::new() }
    }

    /// The same `(real, gan, ldm)` counts for every stage.
    pub fn uniform(real: usize, gan: usize, ldm: usize) -> Self {
        let mut q = Quota::empty();
        for stage in Stage::ALL {
            q.set(stage, TrueSource::Real, real);
            q.set(stage, TrueSource::Gan, gan);
            q.set(stage, TrueSource::Ldm, ldm);
        }
        q
    }

    /// 100 real, 50 adversarial and 50 diffusion images per stage.
    pub fn reference() -> Self {
        Quota::uniform(100, 50, 50)
    }

    pub fn set(&mut self, stage: Stage, source: TrueSource, count: usize) -> &mut Self {
        self.counts.entry(stage).or_default().insert(source, count);
        self
    }

    pub fn get(&self, stage: Stage, source: TrueSource) -> usize {
        self.counts
            .get(&stage)
            .and_then(|m| m.get(&source))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().flat_map(|m| m.values()).sum()
    }

    pub fn source_total(&self, source: TrueSource) -> usize {
        Stage::ALL.iter().map(|&s| self.get(s, source)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolItem {
    /// Opaque identifier shown to raters.
    pub image_id: String,
    pub true_source: TrueSource,
    pub stage: Stage,
    /// Identifier of the underlying image in its source catalog.
    pub origin_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPool {
    pub pool_id: String,
    pub quota: Quota,
    pub items: Vec<PoolItem>,
}

impl EvalPool {
    /// Checks unique ids and that per-`(stage, source)` counts equal the quota.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut seen: BTreeMap<(Stage, TrueSource), usize> = BTreeMap::new();
        for item in &self.items {
            if !ids.insert(item.image_id.as_str()) {
                return Err(Error::Composition(format!("duplicate image id `{}`", item.image_id)));
            }
            *seen.entry((item.stage, item.true_source)).or_default() += 1;
        }
        for stage in Stage::ALL {
            for source in TrueSource::ALL {
                let have = seen.get(&(stage, source)).copied().unwrap_or(0);
                let want = self.quota.get(stage, source);
                if have != want {
                    return Err(Error::Composition(format!(
                        "({source}, {stage}) has {have} items, quota {want}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn item(&self, image_id: &str) -> Option<&PoolItem> {
        self.items.iter().find(|i| i.image_id == image_id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count(&self, source: TrueSource) -> usize {
        self.items.iter().filter(|i| i.true_source == source).count()
    }

    pub fn count_stage(&self, stage: Stage, source: TrueSource) -> usize {
        self.items
            .iter()
            .filter(|i| i.stage == stage && i.true_source == source)
            .count()
    }
}

/// Opaque rater-facing id that reveals nothing about the origin.
pub fn opaque_image_id(pool_id: &str, origin_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(pool_id.as_bytes());
    h.update([0u8]);
    h.update(origin_id.as_bytes());
    format!("img-{}", &hex::encode(h.finalize())[..20])
}

/// Samples a pool that meets `quota` exactly. Real candidates are all
/// non-synthetic records of `real`; `gan` and `ldm` contribute records of
/// their own synthetic source.
pub fn create_pool(
    pool_id: &str,
    real: &DatasetManifest,
    gan: &DatasetManifest,
    ldm: &DatasetManifest,
    quota: &Quota,
    seed: u64,
) -> Result<EvalPool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(quota.total());
    for stage in Stage::ALL {
        for source in TrueSource::ALL {
            let needed = quota.get(stage, source);
            if needed == 0 {
                continue;
            }
            let candidates: Vec<&ImageRecord> = match source {
                TrueSource::Real => real.of_stage(stage).into_iter().filter(|r| !r.source.is_synthetic()).collect(),
                TrueSource::Gan => gan.of_stage(stage).into_iter().filter(|r| r.source == Source::SyntheticGan).collect(),
                TrueSource::Ldm => ldm.of_stage(stage).into_iter().filter(|r| r.source == Source::SyntheticLdm).collect(),
            };
            if candidates.len() < needed {
                return Err(Error::InsufficientPool {
                    source_kind: source.as_str().into(),
                    stage,
                    needed,
                    available: candidates.len(),
                });
            }
            let mut picked = index::sample(&mut rng, candidates.len(), needed).into_vec();
            picked.sort_unstable();
            for i in picked {
                let rec = candidates[i];
                items.push(PoolItem {
                    image_id: opaque_image_id(pool_id, &rec.image_id),
                    true_source: source,
                    stage,
                    origin_id: rec.image_id.clone(),
                });
            }
        }
    }
    items.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let pool = EvalPool {
        pool_id: pool_id.into(),
        quota: quota.clone(),
        items,
    };
    pool.validate()?;
    Ok(pool)
}

/// Seeded permutation of `0..n` used as a session's presentation order.
pub fn presentation_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}
