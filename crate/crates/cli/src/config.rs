//! Declarative pipeline configuration.
//!
//! A config file is a TOML document whose keys are merged over a complete
//! set of defaults, so a minimal file only names what differs. Toy mode is
//! the default; setting `toy_mode = false` switches the base to reference
//! scale and requires dataset paths.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/demo"
//!
//! [diffusion]
//! epochs = 200
//!
//! [classify]
//! seeds = [1, 2, 3]
//! grid = [
//!   { real_n = 180, gan_n = 0, ldm_n = 0 },
//!   { real_n = 180, gan_n = 100, ldm_n = 100 },
//! ]
//! ```

use std::path::{Path, PathBuf};

use embryogen_core::classify::{ClassifierConfig, ClassifierFamily, MixSpec};
use embryogen_core::diffusion::DiffusionTrainConfig;
use embryogen_core::fid::{INCEPTION_ID, TOY_POOL_ID};
use embryogen_core::gan::GanTrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },

    #[error("TOML syntax error: {0}")]
    Syntax(String),

    #[error("unknown key `{key}` at `{path}`{}", suggestion.as_ref().map(|s| format!(", did you mean `{s}`?")).unwrap_or_default())]
    UnknownKey {
        path: String,
        key: String,
        suggestion: Option<String>,
    },

    #[error("invalid value at `{path}`: {message}")]
    Type { path: String, message: String },

    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ConfigError {
    pub fn kind(&self) -> &'static str {
        match self {
            ConfigError::Read { .. } => "config_read",
            ConfigError::Syntax(_) => "config_syntax",
            ConfigError::UnknownKey { .. } => "config_unknown_key",
            ConfigError::Type { .. } => "config_type",
            ConfigError::Invalid(_) => "config_invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Procedural images rendered per stage in toy mode.
    pub toy_per_stage: usize,
    pub toy_resolution: usize,
    pub train_per_stage: usize,
    pub test_per_stage: usize,
    /// Size of the procedural external blastocyst set in toy mode.
    pub external_count: usize,
    /// Fragmentation cutoff in percent; records above it are dropped.
    pub fragmentation_threshold: f64,
    /// CSV with `sequence_id,timestamp_hours,path,fragmentation_pct`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<PathBuf>,
    /// CSV with `sequence_id,stage,onset_hours`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    /// Directory that frame paths are relative to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
    /// Directory in the external layout (images plus label file).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Pca,
    Pooled,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentConfig {
    pub codec: CodecKind,
    /// Image side the codec works at.
    pub resolution: usize,
    /// Principal components kept by the `pca` codec.
    pub components: usize,
    /// Side of the `pooled` codec's latent grid.
    pub latent_resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectConfig {
    /// Synthetic images drawn per checkpoint for its FID.
    pub fid_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    /// Synthetic images per stage from each selected generator.
    pub per_stage: usize,
    /// Side of the written synthetic images.
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    pub grid: Vec<MixSpec>,
    pub seeds: Vec<u64>,
    /// Normal quantile for confidence intervals.
    pub z: f64,
    /// Replaces the seed count inside interval widths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_override: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuringConfig {
    pub pool_id: String,
    pub real_per_stage: usize,
    pub gan_per_stage: usize,
    pub ldm_per_stage: usize,
    pub seed: u64,
    /// SQLite file, relative to the output directory.
    pub database: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub toy_mode: bool,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Worker threads for independent jobs; 0 uses every core.
    pub jobs: usize,
    pub fid_extractor: String,
    pub bind: String,
    pub data: DataConfig,
    pub latent: LatentConfig,
    pub diffusion: DiffusionTrainConfig,
    pub gan: GanTrainConfig,
    pub select: SelectConfig,
    pub generate: GenerateConfig,
    pub classifier: ClassifierConfig,
    pub classify: ClassifyConfig,
    pub turing: TuringConfig,
}

impl PipelineConfig {
    /// Desk-scale defaults: small procedural corpus, 32-pixel models.
    pub fn toy() -> Self {
        PipelineConfig {
            toy_mode: true,
            output_dir: PathBuf::from("runs/toy"),
            seed: 0,
            jobs: 0,
            fid_extractor: TOY_POOL_ID.into(),
            bind: "127.0.0.1:8080".into(),
            data: DataConfig {
                toy_per_stage: 200,
                toy_resolution: 64,
                train_per_stage: 130,
                test_per_stage: 20,
                external_count: 98,
                fragmentation_threshold: 15.0,
                frames: None,
                annotations: None,
                image_root: None,
                external_dir: None,
            },
            latent: LatentConfig {
                codec: CodecKind::Pca,
                resolution: 32,
                components: 32,
                latent_resolution: 8,
            },
            diffusion: DiffusionTrainConfig {
                epochs: 300,
                batch_size: 32,
                learning_rate: 1e-3,
                steps: 200,
                beta_start: 1e-4,
                beta_end: 0.05,
                fid_interval: 100,
                seed: 0,
                widths: vec![256, 128, 64],
                time_dim: 32,
            },
            gan: GanTrainConfig {
                steps: 300,
                batch_size: 16,
                resolution: 32,
                latent_dim: 64,
                mapping_layers: 2,
                channels: vec![32, 32, 16, 8],
                disc_channels: vec![8, 16, 32],
                checkpoint_interval: 100,
                ..GanTrainConfig::default()
            },
            select: SelectConfig { fid_samples: 100 },
            generate: GenerateConfig {
                per_stage: 500,
                resolution: 64,
            },
            classifier: ClassifierConfig {
                family: ClassifierFamily::ConvSmall,
                batch_size: 32,
                learning_rate: 3e-3,
                patience_epochs: 5,
                max_epochs: 25,
                input_resolution: 32,
                width: 8,
                lr_patience: 3,
                ..ClassifierConfig::default()
            },
            classify: ClassifyConfig {
                grid: vec![MixSpec::new(130, 0, 0), MixSpec::new(130, 65, 65), MixSpec::new(130, 250, 250)],
                seeds: vec![1, 2, 3],
                z: 1.96,
                n_override: None,
            },
            turing: TuringConfig {
                pool_id: "toy".into(),
                real_per_stage: 20,
                gan_per_stage: 10,
                ldm_per_stage: 10,
                seed: 0,
                database: PathBuf::from("turing.sqlite"),
            },
        }
    }

    /// Reference-scale defaults for clinic data.
    pub fn reference() -> Self {
        let toy = PipelineConfig::toy();
        PipelineConfig {
            toy_mode: false,
            output_dir: PathBuf::from("runs/reference"),
            data: DataConfig {
                train_per_stage: 1000,
                test_per_stage: 100,
                ..toy.data
            },
            latent: LatentConfig {
                codec: CodecKind::Pooled,
                resolution: 256,
                components: 256,
                latent_resolution: 64,
            },
            diffusion: DiffusionTrainConfig::default(),
            gan: GanTrainConfig::default(),
            select: SelectConfig { fid_samples: 1000 },
            generate: GenerateConfig {
                per_stage: 5000,
                resolution: 256,
            },
            classifier: ClassifierConfig::default(),
            classify: ClassifyConfig {
                grid: MixSpec::ladder(1000, &[0, 500, 1000, 2000, 3000, 4000, 5000]),
                seeds: vec![1, 2, 3, 4, 5],
                z: 1.96,
                n_override: None,
            },
            turing: TuringConfig {
                pool_id: "reference".into(),
                real_per_stage: 100,
                gan_per_stage: 50,
                ldm_per_stage: 50,
                ..toy.turing
            },
            ..toy
        }
    }

    /// Checks cross-field constraints and, outside toy mode, that every
    /// referenced path exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let d = &self.data;
        if d.train_per_stage == 0 || d.test_per_stage == 0 {
            return invalid("data.train_per_stage and data.test_per_stage must be positive".into());
        }
        if self.toy_mode {
            if d.train_per_stage + d.test_per_stage > d.toy_per_stage {
                return invalid(format!(
                    "data.train_per_stage + data.test_per_stage ({}) exceeds data.toy_per_stage ({})",
                    d.train_per_stage + d.test_per_stage,
                    d.toy_per_stage
                ));
            }
            if d.toy_resolution < 64 {
                return invalid(format!("data.toy_resolution {} < 64", d.toy_resolution));
            }
        } else {
            for (key, path) in [
                ("data.frames", &d.frames),
                ("data.annotations", &d.annotations),
                ("data.image_root", &d.image_root),
            ] {
                match path {
                    None => return invalid(format!("{key} is required when toy_mode = false")),
                    Some(p) if !p.exists() => return invalid(format!("{key} {} does not exist", p.display())),
                    _ => {}
                }
            }
            if let Some(p) = &d.external_dir {
                if !p.is_dir() {
                    return invalid(format!("data.external_dir {} is not a directory", p.display()));
                }
            }
        }
        if !(0.0..=100.0).contains(&d.fragmentation_threshold) {
            return invalid(format!("data.fragmentation_threshold {} outside [0, 100]", d.fragmentation_threshold));
        }
        if self.fid_extractor != TOY_POOL_ID && self.fid_extractor != INCEPTION_ID {
            return invalid(format!("fid_extractor `{}` is not registered", self.fid_extractor));
        }
        if self.latent.resolution == 0 || self.latent.components == 0 || self.latent.latent_resolution == 0 {
            return invalid("latent sizes must be positive".into());
        }
        if self.latent.codec == CodecKind::Pca && self.latent.components > d.train_per_stage {
            return invalid(format!(
                "latent.components {} exceeds the {} training images per stage",
                self.latent.components, d.train_per_stage
            ));
        }
        if self.latent.codec == CodecKind::Pooled && self.latent.resolution % self.latent.latent_resolution != 0 {
            return invalid("latent.resolution must be a multiple of latent.latent_resolution".into());
        }
        self.diffusion.validate().map_err(|e| ConfigError::Invalid(format!("diffusion: {e}")))?;
        self.gan.validate().map_err(|e| ConfigError::Invalid(format!("gan: {e}")))?;
        self.classifier.validate().map_err(|e| ConfigError::Invalid(format!("classifier: {e}")))?;
        if self.select.fid_samples < 2 {
            return invalid("select.fid_samples must be at least 2".into());
        }
        if self.generate.per_stage == 0 || self.generate.resolution == 0 {
            return invalid("generate.per_stage and generate.resolution must be positive".into());
        }
        for spec in &self.classify.grid {
            spec.validate().map_err(|e| ConfigError::Invalid(format!("classify.grid: {e}")))?;
            if spec.real_n > d.train_per_stage {
                return invalid(format!(
                    "classify.grid asks for {} real images per stage, only {} are in the training split",
                    spec.real_n, d.train_per_stage
                ));
            }
            if spec.gan_n.max(spec.ldm_n) > self.generate.per_stage {
                return invalid(format!(
                    "classify.grid asks for {} synthetic images per stage, generate.per_stage is {}",
                    spec.gan_n.max(spec.ldm_n),
                    self.generate.per_stage
                ));
            }
        }
        if !self.classify.grid.is_empty() && self.classify.seeds.len() < 2 {
            return invalid("classify.seeds needs at least 2 seeds".into());
        }
        let mut seeds = self.classify.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.classify.seeds.len() {
            return invalid("classify.seeds contains duplicates".into());
        }
        if self.classify.n_override == Some(0) || !(self.classify.z > 0.0) {
            return invalid("classify.z and classify.n_override must be positive".into());
        }
        let t = &self.turing;
        if t.real_per_stage > d.test_per_stage {
            return invalid(format!(
                "turing.real_per_stage {} exceeds the {} held-out real images per stage",
                t.real_per_stage, d.test_per_stage
            ));
        }
        if t.gan_per_stage.max(t.ldm_per_stage) > self.generate.per_stage {
            return invalid("turing synthetic quota exceeds generate.per_stage".into());
        }
        if t.pool_id.is_empty() {
            return invalid("turing.pool_id must not be empty".into());
        }
        self.bind
            .parse::<std::net::SocketAddr>()
            .map_err(|e| ConfigError::Invalid(format!("bind `{}`: {e}", self.bind)))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration always serialises")
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Names quoted in backticks, in order.
fn backticked(message: &str) -> Vec<&str> {
    message.split('`').skip(1).step_by(2).collect()
}

fn closest<'a>(key: &str, candidates: &[&'a str]) -> Option<&'a str> {
    candidates
        .iter()
        .map(|c| (strsim::damerau_levenshtein(key, c), *c))
        .filter(|&(d, c)| d <= 3.max(c.len() / 3))
        .min()
        .map(|(_, c)| c)
}

/// Parses a document, fills defaults and validates the result.
pub fn parse_config(text: &str) -> Result<PipelineConfig, ConfigError> {
    let user: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    let toy = match user.get("toy_mode") {
        None => true,
        Some(toml::Value::Boolean(b)) => *b,
        Some(other) => {
            return Err(ConfigError::Type {
                path: "toy_mode".into(),
                message: format!("expected a boolean, found {}", other.type_str()),
            })
        }
    };
    let base = if toy { PipelineConfig::toy() } else { PipelineConfig::reference() };
    let mut merged = match toml::Value::try_from(&base) {
        Ok(toml::Value::Table(t)) => t,
        _ => unreachable!("configuration serialises to a table"),
    };
    merge(&mut merged, user);
    let config: PipelineConfig =
        serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
            let path = e.path().to_string();
            let message = e.inner().to_string();
            if message.starts_with("unknown field") {
                let names = backticked(&message);
                let key = names.first().map(|s| s.to_string()).unwrap_or_default();
                let suggestion = closest(&key, &names[1.min(names.len())..]).map(str::to_string);
                let parent = path.rsplit_once('.').map(|(p, _)| p.to_string()).unwrap_or_default();
                let full = if parent.is_empty() || path == key { key.clone() } else { format!("{parent}.{key}") };
                ConfigError::UnknownKey { path: full, key, suggestion }
            } else {
                ConfigError::Type { path, message }
            }
        })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_toy_default() {
        assert_eq!(parse_config("").unwrap(), PipelineConfig::toy());
    }

    #[test]
    fn nested_defaults_survive_partial_sections() {
        let c = parse_config("[diffusion]\nepochs = 10\n").unwrap();
        assert_eq!(c.diffusion.epochs, 10);
        assert_eq!(c.diffusion.steps, PipelineConfig::toy().diffusion.steps);
    }

    #[test]
    fn unknown_key_gets_a_suggestion() {
        match parse_config("[diffusion]\nfid_intervall = 5\n").unwrap_err() {
            ConfigError::UnknownKey { path, key, suggestion } => {
                assert_eq!(key, "fid_intervall");
                assert_eq!(path, "diffusion.fid_intervall");
                assert_eq!(suggestion.as_deref(), Some("fid_interval"));
            }
            other => panic!("unexpected {other}"),
        }
        match parse_config("sead = 1\n").unwrap_err() {
            ConfigError::UnknownKey { suggestion, .. } => assert_eq!(suggestion.as_deref(), Some("seed")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn type_errors_carry_a_path() {
        match parse_config("[classifier]\nbatch_size = \"big\"\n").unwrap_err() {
            ConfigError::Type { path, .. } => assert_eq!(path, "classifier.batch_size"),
            other => panic!("unexpected {other}"),
        }
        match parse_config("[classify]\ngrid = [{ real_n = 1, gan_n = -2, ldm_n = 0 }]\n").unwrap_err() {
            ConfigError::Type { path, .. } => assert_eq!(path, "classify.grid[0].gan_n"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn normalisation_is_idempotent() {
        let once = parse_config("seed = 4\n[gan]\nsteps = 20\n[classify]\nseeds = [5, 6]\n").unwrap();
        let twice = parse_config(&once.to_toml()).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.to_toml(), twice.to_toml());
    }

    #[test]
    fn reference_mode_needs_paths() {
        assert!(matches!(parse_config("toy_mode = false\n"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn cross_field_checks() {
        assert!(parse_config("[data]\ntrain_per_stage = 190\n").is_err());
        assert!(parse_config("[classify]\nseeds = [1]\n").is_err());
        assert!(parse_config("fid_extractor = \"nope\"\n").is_err());
        assert!(parse_config("[turing]\nreal_per_stage = 21\n").is_err());
    }
}
