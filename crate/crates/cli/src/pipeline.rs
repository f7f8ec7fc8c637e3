//! Stage orchestration with content-addressed completion markers.
//!
//! Every stage owns one directory under the output root and finishes by
//! writing `<stage>/.complete.json`, which lists the SHA-256 of each file the
//! stage produced together with the stage's input hash. The input hash
//! covers the stage name, the configuration it reads and the marker digests
//! of the stages it depends on, so a change anywhere upstream invalidates
//! everything downstream while an unchanged rerun is skipped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use embryogen_core::classify::{
    aggregate_seeds, build_mix, evaluate, load_examples, train_classifier, AggregatedRow, Classifier,
    ClassifierConfig, Example, GridRow, ImageLoader, MixPools, MixSpec, ReportBundle,
};
use embryogen_core::data::{
    build_manifest, filter_fragmentation, generate_toy_dataset, generate_toy_dataset_styled, load_external_blastocyst,
    select_representative_frames, split_sequences, write_external_layout, DatasetManifest, Frame, ImageRecord,
    Quality, Source, Split, Stage, StageOnset, ToyStyle,
};
use embryogen_core::diffusion::{train_diffusion, DiffusionModel, LatentCodec};
use embryogen_core::fid::{fid_of_checkpoint, select_best, write_fid_csv, FidEntry, FidHistory, FidRow, ImageSampler};
use embryogen_core::gan::{train_gan, GanModel};
use embryogen_core::raster::GrayImage;
use embryogen_core::turing::{create_pool, EvalPool, Quota};
use embryogen_turing::{ServiceError, Store};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{CodecKind, ConfigError, PipelineConfig};

pub const MARKER_FILE: &str = ".complete.json";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const NORMALIZED_CONFIG: &str = "config.normalized.toml";

/// Largest accuracy gap, in absolute terms, tolerated between a mix with
/// synthetic images and the real-only mix of the same real count.
pub const SANITY_BAND: f64 = 0.10;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Core(#[from] embryogen_core::Error),

    #[error(transparent)]
    Service(#[from] ServiceError),

    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },

    #[error("unknown stage `{name}`{}", suggestion.as_ref().map(|s| format!(", did you mean `{s}`?")).unwrap_or_default())]
    UnknownStage { name: String, suggestion: Option<String> },

    #[error("stage `{stage}` depends on `{dependency}`, which is {reason}; include it in --stages")]
    MissingDependency {
        stage: StageName,
        dependency: StageName,
        reason: String,
    },

    #[error("{0}")]
    Format(String),
}

impl PipelineError {
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(e) => e.kind(),
            PipelineError::Core(_) => "stage_failed",
            PipelineError::Service(e) => e.kind(),
            PipelineError::Io { .. } => "io",
            PipelineError::UnknownStage { .. } => "unknown_stage",
            PipelineError::MissingDependency { .. } => "missing_dependency",
            PipelineError::Format(_) => "format",
        }
    }
}

pub type PipelineResult<T> = Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn json_err(e: serde_json::Error) -> PipelineError {
    PipelineError::Format(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageName {
    Ingest,
    TrainGen,
    Select,
    Generate,
    TrainClf,
    Evaluate,
    Report,
    Serve,
}

impl StageName {
    /// Execution order.
    pub const ALL: [StageName; 8] = [
        StageName::Ingest,
        StageName::TrainGen,
        StageName::Select,
        StageName::Generate,
        StageName::TrainClf,
        StageName::Evaluate,
        StageName::Report,
        StageName::Serve,
    ];

    /// Stages run by a bare `embryogen run`.
    pub const BATCH: [StageName; 7] = [
        StageName::Ingest,
        StageName::TrainGen,
        StageName::Select,
        StageName::Generate,
        StageName::TrainClf,
        StageName::Evaluate,
        StageName::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Ingest => "ingest",
            StageName::TrainGen => "train-gen",
            StageName::Select => "select",
            StageName::Generate => "generate",
            StageName::TrainClf => "train-clf",
            StageName::Evaluate => "evaluate",
            StageName::Report => "report",
            StageName::Serve => "serve",
        }
    }

    /// Direct prerequisites, most specific first.
    pub fn deps(self) -> &'static [StageName] {
        use StageName::*;
        match self {
            Ingest => &[],
            TrainGen => &[Ingest],
            Select => &[TrainGen, Ingest],
            Generate => &[Select, TrainGen, Ingest],
            TrainClf => &[Generate, Ingest],
            Evaluate => &[TrainClf, Ingest],
            Report => &[Evaluate, Select],
            Serve => &[Generate],
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        StageName::ALL.iter().copied().find(|n| n.as_str() == s).ok_or_else(|| {
            let suggestion = StageName::ALL
                .iter()
                .map(|n| (strsim::levenshtein(s, n.as_str()), n.as_str()))
                .filter(|&(d, _)| d <= 3)
                .min()
                .map(|(_, n)| n.to_string());
            PipelineError::UnknownStage {
                name: s.to_string(),
                suggestion,
            }
        })
    }
}

/// Parses a comma-separated stage list.
pub fn parse_stages(list: &str) -> PipelineResult<BTreeSet<StageName>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub stage: StageName,
    pub input_hash: String,
    /// Relative path to SHA-256, for every file in the stage directory.
    pub artifacts: BTreeMap<String, String>,
}

impl Marker {
    /// Hash that downstream stages fold into their input hash.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("marker serialises"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageOutcome {
    pub stage: StageName,
    pub status: StageStatus,
    pub input_hash: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub input_hash: String,
    pub digest: String,
}

/// Enough to reproduce a run: the seed, the normalized configuration's hash
/// and every completed stage's hashes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config_hash: String,
    pub stages: BTreeMap<StageName, StageEntry>,
}

/// Best checkpoint of one (stage, family) FID history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub stage: Stage,
    pub family: String,
    pub epoch: usize,
    pub fid: f64,
    pub checkpoint: String,
}

/// One grid cell's internal-set accuracy compared with the real-only mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityRow {
    pub spec: MixSpec,
    pub accuracy_mean: f64,
    pub baseline_mean: f64,
    pub delta: f64,
    pub within_band: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub synthetic_per_stage: BTreeMap<String, usize>,
    pub selected: Vec<Selected>,
    pub sanity_band: f64,
    pub sanity: Vec<SanityRow>,
    pub all_within_band: bool,
    pub turing_pool: String,
    pub turing_items: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Roots {
    real: String,
    external: Option<String>,
}

#[derive(Serialize)]
struct GanHistory {
    d_loss: Vec<f64>,
    g_loss: Vec<f64>,
    r1: Vec<Option<f64>>,
}

#[derive(Debug, Deserialize)]
struct FrameRow {
    sequence_id: String,
    timestamp_hours: f64,
    path: String,
    #[serde(default)]
    fragmentation_pct: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct OnsetRow {
    sequence_id: String,
    stage: Stage,
    onset_hours: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_sha256(path: &Path) -> PipelineResult<String> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

/// Stable per-purpose seed.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

/// Applies `f` to every item on up to `jobs` scoped threads, keeping order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = jobs.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|p| p.into_inner()).expect("every slot filled"))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> PipelineResult<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(json_err)?;
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> PipelineResult<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Format(format!("{}: {e}", path.display())))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> PipelineResult<()> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.strip_prefix(root).map(|p| p != Path::new(MARKER_FILE)).unwrap_or(true) {
            out.push(path);
        }
    }
    Ok(())
}

/// SHA-256 of every file below `dir` except the marker, keyed by `/`-joined
/// relative path.
pub fn hash_tree(dir: &Path) -> PipelineResult<BTreeMap<String, String>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let mut out = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(dir).expect("below root");
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        out.insert(key, file_sha256(&f)?);
    }
    Ok(out)
}

fn synthetic_family(source: Source) -> &'static str {
    match source {
        Source::SyntheticGan => "gan",
        _ => "ldm",
    }
}

/// Resolves real, synthetic and external records against their own roots.
struct RoutedLoader {
    real: PathBuf,
    synthetic: PathBuf,
    external: Option<PathBuf>,
}

impl ImageLoader for RoutedLoader {
    fn load(&self, record: &ImageRecord) -> embryogen_core::Result<GrayImage> {
        let root = if record.source.is_synthetic() {
            &self.synthetic
        } else if record.source == Source::External {
            self.external.as_ref().ok_or_else(|| {
                embryogen_core::Error::Invalid(format!("no external root for {}", record.image_id))
            })?
        } else {
            &self.real
        };
        GrayImage::load_png(&root.join(&record.path))
    }
}

pub struct Pipeline {
    config: PipelineConfig,
    out: PathBuf,
    verbose: bool,
}

impl Pipeline {
    /// Validates `config` before anything touches the disk.
    pub fn new(config: PipelineConfig) -> PipelineResult<Self> {
        config.validate()?;
        let out = config.output_dir.clone();
        Ok(Pipeline {
            config,
            out,
            verbose: false,
        })
    }

    pub fn verbose(mut self, on: bool) -> Self {
        self.verbose = on;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn stage_dir(&self, stage: StageName) -> PathBuf {
        self.out.join(stage.as_str())
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            println!("{}", msg.as_ref());
        }
    }

    fn jobs(&self) -> usize {
        if self.config.jobs > 0 {
            self.config.jobs
        } else {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        }
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(self.config.to_toml().as_bytes())
    }

    /// Writes the normalized configuration next to the stage outputs.
    pub fn echo_config(&self) -> PipelineResult<PathBuf> {
        fs::create_dir_all(&self.out).map_err(io_err(&self.out))?;
        let path = self.out.join(NORMALIZED_CONFIG);
        fs::write(&path, self.config.to_toml()).map_err(io_err(&path))?;
        Ok(path)
    }

    fn section(&self, stage: StageName) -> PipelineResult<serde_json::Value> {
        let c = &self.config;
        let v = match stage {
            StageName::Ingest => {
                let mut files = BTreeMap::new();
                if !c.toy_mode {
                    for p in [&c.data.frames, &c.data.annotations].into_iter().flatten() {
                        files.insert(p.display().to_string(), file_sha256(p)?);
                    }
                }
                serde_json::json!({ "toy_mode": c.toy_mode, "seed": c.seed, "data": c.data, "inputs": files })
            }
            StageName::TrainGen => serde_json::json!({
                "seed": c.seed, "latent": c.latent, "diffusion": c.diffusion, "gan": c.gan
            }),
            StageName::Select => serde_json::json!({
                "seed": c.seed, "fid_extractor": c.fid_extractor, "select": c.select
            }),
            StageName::Generate => serde_json::json!({
                "seed": c.seed, "generate": c.generate, "turing": {
                    "pool_id": c.turing.pool_id,
                    "real_per_stage": c.turing.real_per_stage,
                    "gan_per_stage": c.turing.gan_per_stage,
                    "ldm_per_stage": c.turing.ldm_per_stage,
                    "seed": c.turing.seed,
                }
            }),
            StageName::TrainClf => serde_json::json!({
                "classifier": c.classifier, "grid": c.classify.grid, "seeds": c.classify.seeds
            }),
            StageName::Evaluate | StageName::Report => serde_json::json!({ "classify": c.classify }),
            StageName::Serve => serde_json::json!({ "bind": c.bind, "database": c.turing.database }),
        };
        Ok(v)
    }

    fn input_hash(&self, stage: StageName, digests: &BTreeMap<StageName, String>) -> PipelineResult<String> {
        let deps: Vec<(&str, &String)> = stage
            .deps()
            .iter()
            .map(|d| (d.as_str(), digests.get(d).expect("dependencies resolved first")))
            .collect();
        let doc = serde_json::json!({ "stage": stage, "config": self.section(stage)?, "deps": deps });
        Ok(sha256_hex(&serde_json::to_vec(&doc).map_err(json_err)?))
    }

    pub fn read_marker(&self, stage: StageName) -> Option<Marker> {
        read_json(&self.stage_dir(stage).join(MARKER_FILE)).ok()
    }

    /// `Ok(marker)` when the stage output on disk matches `input_hash` and
    /// every artifact still hashes to its recorded value.
    fn check_fresh(&self, stage: StageName, input_hash: &str) -> Result<Marker, String> {
        let marker = self.read_marker(stage).ok_or_else(|| "not completed".to_string())?;
        if marker.input_hash != input_hash {
            return Err("stale (its inputs or configuration changed)".into());
        }
        match hash_tree(&self.stage_dir(stage)) {
            Ok(tree) if tree == marker.artifacts => Ok(marker),
            _ => Err("corrupt (its artifacts no longer match their hashes)".into()),
        }
    }

    /// Verifies a stage that will not run, and everything below it.
    fn verify(
        &self,
        stage: StageName,
        digests: &mut BTreeMap<StageName, String>,
    ) -> Result<(), String> {
        if digests.contains_key(&stage) {
            return Ok(());
        }
        for &d in stage.deps() {
            self.verify(d, digests).map_err(|r| format!("built on `{d}`, which is {r}"))?;
        }
        let hash = self.input_hash(stage, digests).map_err(|e| e.to_string())?;
        let marker = self.check_fresh(stage, &hash)?;
        digests.insert(stage, marker.digest());
        Ok(())
    }

    /// Runs the requested batch stages in dependency order. Requested stages
    /// whose output is fresh are skipped; unrequested prerequisites must
    /// already be fresh. `serve` is not a batch stage and is ignored here.
    pub fn run(&self, requested: &BTreeSet<StageName>) -> PipelineResult<Vec<StageOutcome>> {
        self.echo_config()?;
        let mut digests: BTreeMap<StageName, String> = BTreeMap::new();
        let mut outcomes = Vec::new();
        for stage in StageName::BATCH {
            if !requested.contains(&stage) {
                continue;
            }
            for &dep in stage.deps() {
                if requested.contains(&dep) {
                    continue;
                }
                self.verify(dep, &mut digests).map_err(|reason| PipelineError::MissingDependency {
                    stage,
                    dependency: dep,
                    reason,
                })?;
            }
            let input_hash = self.input_hash(stage, &digests)?;
            let (status, marker) = match self.check_fresh(stage, &input_hash) {
                Ok(m) => {
                    self.log(format!("[{stage}] up to date, skipped"));
                    (StageStatus::Skipped, m)
                }
                Err(_) => {
                    let dir = self.stage_dir(stage);
                    if dir.exists() {
                        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
                    }
                    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                    let started = Instant::now();
                    self.log(format!("[{stage}] running"));
                    self.execute(stage)?;
                    let marker = Marker {
                        stage,
                        input_hash: input_hash.clone(),
                        artifacts: hash_tree(&dir)?,
                    };
                    write_json(&dir.join(MARKER_FILE), &marker)?;
                    self.log(format!("[{stage}] done in {:.1}s", started.elapsed().as_secs_f64()));
                    (StageStatus::Ran, marker)
                }
            };
            let digest = marker.digest();
            digests.insert(stage, digest.clone());
            outcomes.push(StageOutcome {
                stage,
                status,
                input_hash,
                digest,
            });
        }
        self.write_run_manifest(&outcomes)?;
        Ok(outcomes)
    }

    fn write_run_manifest(&self, outcomes: &[StageOutcome]) -> PipelineResult<()> {
        let path = self.out.join(RUN_MANIFEST);
        let config_hash = self.config_hash();
        let mut manifest = match read_json::<RunManifest>(&path) {
            Ok(m) if m.config_hash == config_hash => m,
            _ => RunManifest {
                seed: self.config.seed,
                config_hash,
                stages: BTreeMap::new(),
            },
        };
        for o in outcomes {
            manifest.stages.insert(
                o.stage,
                StageEntry {
                    input_hash: o.input_hash.clone(),
                    digest: o.digest.clone(),
                },
            );
        }
        write_json(&path, &manifest)
    }

    fn execute(&self, stage: StageName) -> PipelineResult<()> {
        match stage {
            StageName::Ingest => self.ingest(),
            StageName::TrainGen => self.train_generators(),
            StageName::Select => self.select(),
            StageName::Generate => self.generate(),
            StageName::TrainClf => self.train_classifiers(),
            StageName::Evaluate => self.evaluate(),
            StageName::Report => self.report(),
            StageName::Serve => Ok(()),
        }
    }

    fn roots(&self) -> PipelineResult<Roots> {
        read_json(&self.stage_dir(StageName::Ingest).join("roots.json"))
    }

    fn resolve(&self, root: &str) -> PathBuf {
        let p = PathBuf::from(root);
        if p.is_absolute() {
            p
        } else {
            self.out.join(p)
        }
    }

    fn loader(&self) -> PipelineResult<RoutedLoader> {
        let roots = self.roots()?;
        Ok(RoutedLoader {
            real: self.resolve(&roots.real),
            synthetic: self.stage_dir(StageName::Generate),
            external: roots.external.as_deref().map(|r| self.resolve(r)),
        })
    }

    fn real_manifest(&self) -> PipelineResult<DatasetManifest> {
        Ok(DatasetManifest::load(&self.stage_dir(StageName::Ingest).join("manifest.jsonl"))?)
    }

    fn external_manifest(&self) -> PipelineResult<Option<DatasetManifest>> {
        let path = self.stage_dir(StageName::Ingest).join("external.jsonl");
        if path.exists() {
            Ok(Some(DatasetManifest::load(&path)?))
        } else {
            Ok(None)
        }
    }

    fn training_images(&self, manifest: &DatasetManifest, loader: &RoutedLoader) -> PipelineResult<BTreeMap<Stage, Vec<GrayImage>>> {
        let mut out = BTreeMap::new();
        for stage in Stage::ALL {
            let imgs = manifest
                .of_stage(stage)
                .into_iter()
                .filter(|r| r.split == Split::Train)
                .map(|r| loader.load(r))
                .collect::<embryogen_core::Result<Vec<_>>>()?;
            out.insert(stage, imgs);
        }
        Ok(out)
    }

    fn ingest(&self) -> PipelineResult<()> {
        let c = &self.config;
        let dir = self.stage_dir(StageName::Ingest);
        let (corpus, roots) = if c.toy_mode {
            let images = dir.join("images");
            let mut records = Vec::new();
            for stage in Stage::ALL {
                let sdir = images.join(stage.as_str());
                fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
                for s in generate_toy_dataset(stage, c.data.toy_per_stage, c.seed, c.data.toy_resolution)? {
                    s.image.save_png(&images.join(&s.record.path))?;
                    records.push(s.record);
                }
            }
            let external = dir.join("external");
            let style = ToyStyle {
                brightness: 0.0,
                contrast: 0.85,
                noise_sigma: 0.035,
            };
            let ext = generate_toy_dataset_styled(
                Stage::Blastocyst,
                c.data.external_count,
                derive_seed(c.seed, "external"),
                c.data.toy_resolution,
                style,
                Source::External,
            )?;
            let grades = [Quality::Good, Quality::Fair, Quality::Poor];
            let layout: Vec<(String, GrayImage, Quality)> = ext
                .into_iter()
                .enumerate()
                .map(|(i, s)| (format!("ext_{i:04}.png"), s.image, grades[i % 3]))
                .collect();
            write_external_layout(&external, &layout)?;
            (
                DatasetManifest::new(records, format!("toy corpus, seed {}", c.seed))?,
                Roots {
                    real: "ingest/images".into(),
                    external: Some("ingest/external".into()),
                },
            )
        } else {
            let frames_path = c.data.frames.as_ref().expect("validated");
            let onsets_path = c.data.annotations.as_ref().expect("validated");
            let csv_err = |p: &Path, e: csv::Error| PipelineError::Format(format!("{}: {e}", p.display()));
            let mut frames = Vec::new();
            let mut fragmentation = BTreeMap::new();
            let mut rdr = csv::Reader::from_path(frames_path).map_err(|e| csv_err(frames_path, e))?;
            for row in rdr.deserialize::<FrameRow>() {
                let row = row.map_err(|e| csv_err(frames_path, e))?;
                if let Some(f) = row.fragmentation_pct {
                    fragmentation.insert(row.sequence_id.clone(), f);
                }
                frames.push(Frame::new(row.sequence_id, row.timestamp_hours, row.path));
            }
            let mut annotations: BTreeMap<String, Vec<StageOnset>> = BTreeMap::new();
            let mut rdr = csv::Reader::from_path(onsets_path).map_err(|e| csv_err(onsets_path, e))?;
            for row in rdr.deserialize::<OnsetRow>() {
                let row = row.map_err(|e| csv_err(onsets_path, e))?;
                annotations
                    .entry(row.sequence_id)
                    .or_default()
                    .push(StageOnset::new(row.stage, row.onset_hours));
            }
            for onsets in annotations.values_mut() {
                onsets.sort_by(|a, b| a.onset_hours.total_cmp(&b.onset_hours));
            }
            let manifest = build_manifest(&frames, &annotations, &fragmentation, Source::Volvat)?;
            let abs = |p: &PathBuf| fs::canonicalize(p).map_err(io_err(p)).map(|p| p.display().to_string());
            let roots = Roots {
                real: abs(c.data.image_root.as_ref().expect("validated"))?,
                external: c.data.external_dir.as_ref().map(abs).transpose()?,
            };
            (manifest, roots)
        };

        let kept = select_representative_frames(&filter_fragmentation(&corpus, c.data.fragmentation_threshold));
        let split = split_sequences(
            &kept,
            c.data.train_per_stage,
            c.data.test_per_stage,
            derive_seed(c.seed, "split"),
        )?;
        let split = split.filtered(|r| r.split != Split::Unassigned);
        split.save(&dir.join("manifest.jsonl"))?;
        if let Some(ext) = &roots.external {
            let loaded = load_external_blastocyst(&self.resolve(ext))?;
            DatasetManifest::concat(&[&loaded], format!("external blastocyst set from {ext}"))?
                .save(&dir.join("external.jsonl"))?;
        }
        write_json(&dir.join("roots.json"), &roots)?;
        self.log(format!(
            "[ingest] {} of {} frames kept, {} train and {} test per stage",
            split.len(),
            corpus.len(),
            c.data.train_per_stage,
            c.data.test_per_stage
        ));
        Ok(())
    }

    fn train_generators(&self) -> PipelineResult<()> {
        let c = &self.config;
        let dir = self.stage_dir(StageName::TrainGen);
        let loader = self.loader()?;
        let train = self.training_images(&self.real_manifest()?, &loader)?;
        let mut jobs = Vec::new();
        for stage in Stage::ALL {
            jobs.push((stage, "gan"));
            jobs.push((stage, "ldm"));
        }
        for family in ["gan", "ldm"] {
            let d = dir.join(family);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        let results = par_map(&jobs, self.jobs(), |&(stage, family)| -> PipelineResult<()> {
            let images = &train[&stage];
            let started = Instant::now();
            let fdir = dir.join(family);
            if family == "gan" {
                let cfg = embryogen_core::gan::GanTrainConfig {
                    seed: derive_seed(c.seed ^ c.gan.seed, &format!("gan/{stage}")),
                    ..c.gan.clone()
                };
                let run = train_gan(images, &cfg)?;
                for m in &run.checkpoints {
                    m.save(&fdir.join(GanModel::file_name(stage, m.step)))?;
                }
                let history = GanHistory {
                    d_loss: run.stats.iter().map(|s| s.d_loss).collect(),
                    g_loss: run.stats.iter().map(|s| s.g_loss).collect(),
                    r1: run.stats.iter().map(|s| s.r1).collect(),
                };
                write_json(&fdir.join(format!("{stage}_history.json")), &history)?;
            } else {
                let res = c.latent.resolution;
                let codec = match c.latent.codec {
                    CodecKind::Pca => LatentCodec::fit_pca(images, res, c.latent.components)?,
                    CodecKind::Pooled => LatentCodec::pooled(res, c.latent.latent_resolution),
                    CodecKind::Identity => LatentCodec::identity(res),
                };
                let cfg = embryogen_core::diffusion::DiffusionTrainConfig {
                    seed: derive_seed(c.seed ^ c.diffusion.seed, &format!("ldm/{stage}")),
                    ..c.diffusion.clone()
                };
                let run = train_diffusion(images, codec, &cfg)?;
                for m in &run.checkpoints {
                    m.save(&fdir.join(DiffusionModel::file_name(stage, m.epoch)))?;
                }
                write_json(&fdir.join(format!("{stage}_history.json")), &run.losses)?;
            }
            self.log(format!("[train-gen] {family} {stage} in {:.1}s", started.elapsed().as_secs_f64()));
            Ok(())
        });
        results.into_iter().collect()
    }

    /// Checkpoint files in training order for one (stage, family).
    fn checkpoints(&self, stage: Stage, family: &str) -> Vec<(usize, String)> {
        if family == "gan" {
            self.config
                .gan
                .checkpoint_steps()
                .into_iter()
                .map(|s| (s, format!("gan/{}", GanModel::file_name(stage, s))))
                .collect()
        } else {
            self.config
                .diffusion
                .checkpoint_epochs()
                .into_iter()
                .map(|e| (e, format!("ldm/{}", DiffusionModel::file_name(stage, e))))
                .collect()
        }
    }

    fn load_sampler(&self, rel: &str) -> PipelineResult<Box<dyn ImageSampler + Send + Sync>> {
        let path = self.stage_dir(StageName::TrainGen).join(rel);
        Ok(if rel.starts_with("gan/") {
            Box::new(GanModel::load(&path)?)
        } else {
            Box::new(DiffusionModel::load(&path)?)
        })
    }

    fn generator_resolution(&self, family: &str) -> usize {
        if family == "gan" {
            self.config.gan.resolution
        } else {
            self.config.latent.resolution
        }
    }

    fn select(&self) -> PipelineResult<()> {
        let c = &self.config;
        let dir = self.stage_dir(StageName::Select);
        let loader = self.loader()?;
        let train = self.training_images(&self.real_manifest()?, &loader)?;
        let mut jobs = Vec::new();
        for stage in Stage::ALL {
            jobs.push((stage, "gan"));
            jobs.push((stage, "ldm"));
        }
        let results = par_map(&jobs, self.jobs(), |&(stage, family)| -> PipelineResult<(Vec<FidRow>, Selected)> {
            let res = self.generator_resolution(family);
            let reals: Vec<GrayImage> = train[&stage].iter().map(|i| i.resize(res, res)).collect();
            let mut history = FidHistory::new();
            let mut rows = Vec::new();
            for (epoch, rel) in self.checkpoints(stage, family) {
                let model = self.load_sampler(&rel)?;
                let seed = derive_seed(c.seed, &format!("fid/{family}/{stage}"));
                let fid = fid_of_checkpoint(model.as_ref(), &reals, c.select.fid_samples, &c.fid_extractor, seed)?;
                history.push(FidEntry {
                    epoch,
                    fid,
                    checkpoint: rel,
                })?;
                rows.push(FidRow {
                    stage,
                    family: family.into(),
                    epoch,
                    fid,
                    n_real: reals.len(),
                    n_fake: c.select.fid_samples,
                    extractor: c.fid_extractor.clone(),
                });
            }
            let best = select_best(&history)?;
            self.log(format!("[select] {family} {stage}: epoch {} FID {:.3}", best.epoch, best.fid));
            Ok((
                rows,
                Selected {
                    stage,
                    family: family.into(),
                    epoch: best.epoch,
                    fid: best.fid,
                    checkpoint: best.checkpoint.clone(),
                },
            ))
        });
        let mut rows = Vec::new();
        let mut selected = Vec::new();
        for r in results {
            let (r, s) = r?;
            rows.extend(r);
            selected.push(s);
        }
        write_fid_csv(&dir.join("fid.csv"), &rows)?;
        write_json(&dir.join("selected.json"), &selected)
    }

    fn selected(&self) -> PipelineResult<Vec<Selected>> {
        read_json(&self.stage_dir(StageName::Select).join("selected.json"))
    }

    fn synthetic_manifest(&self, family: &str) -> PipelineResult<DatasetManifest> {
        Ok(DatasetManifest::load(&self.stage_dir(StageName::Generate).join(format!("{family}.jsonl")))?)
    }

    fn generate(&self) -> PipelineResult<()> {
        let c = &self.config;
        let dir = self.stage_dir(StageName::Generate);
        let selected = self.selected()?;
        let res = c.generate.resolution;
        let results = par_map(&selected, self.jobs(), |sel| -> PipelineResult<Vec<ImageRecord>> {
            let model = self.load_sampler(&sel.checkpoint)?;
            let seed = derive_seed(c.seed, &format!("generate/{}/{}", sel.family, sel.stage));
            let images = model.sample_images(c.generate.per_stage, seed)?;
            let rel_dir = format!("{}/{}", sel.family, sel.stage);
            let sdir = dir.join(&rel_dir);
            fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
            let source = if sel.family == "gan" {
                Source::SyntheticGan
            } else {
                Source::SyntheticLdm
            };
            let mut records = Vec::with_capacity(images.len());
            for (i, img) in images.into_iter().enumerate() {
                let id = format!("{}-{}-{i:05}", sel.family, sel.stage);
                let rel = format!("{rel_dir}/{id}.png");
                img.resize(res, res).save_png(&dir.join(&rel))?;
                records.push(ImageRecord::new(id.clone(), id, sel.stage, source, rel));
            }
            Ok(records)
        });
        let mut by_family: BTreeMap<&str, Vec<ImageRecord>> = BTreeMap::new();
        for r in results {
            for rec in r? {
                by_family.entry(synthetic_family(rec.source)).or_default().push(rec);
            }
        }
        let mut manifests = HashMap::new();
        for family in ["gan", "ldm"] {
            let m = DatasetManifest::new(
                by_family.remove(family).unwrap_or_default(),
                format!("{family} samples from selected checkpoints"),
            )?;
            m.save(&dir.join(format!("{family}.jsonl")))?;
            manifests.insert(family, m);
        }

        let t = &c.turing;
        let real = self.real_manifest()?.with_split(Split::Test);
        let pool = create_pool(
            &t.pool_id,
            &real,
            &manifests["gan"],
            &manifests["ldm"],
            &Quota::uniform(t.real_per_stage, t.gan_per_stage, t.ldm_per_stage),
            t.seed,
        )?;
        let tdir = dir.join("turing");
        let idir = tdir.join("images");
        fs::create_dir_all(&idir).map_err(io_err(&idir))?;
        let loader = RoutedLoader {
            real: self.loader()?.real,
            synthetic: dir.clone(),
            external: None,
        };
        let by_id: HashMap<&str, &ImageRecord> = real
            .records()
            .iter()
            .chain(manifests["gan"].records())
            .chain(manifests["ldm"].records())
            .map(|r| (r.image_id.as_str(), r))
            .collect();
        for item in &pool.items {
            let rec = by_id[item.origin_id.as_str()];
            loader.load(rec)?.resize(res, res).save_png(&idir.join(format!("{}.png", item.image_id)))?;
        }
        write_json(&tdir.join("pool.json"), &pool)?;
        self.log(format!(
            "[generate] {} images per stage and family; pool `{}` with {} items",
            c.generate.per_stage,
            pool.pool_id,
            pool.len()
        ));
        Ok(())
    }

    fn pools(&self) -> PipelineResult<MixPools> {
        Ok(MixPools {
            real: self.real_manifest()?,
            gan: self.synthetic_manifest("gan")?,
            ldm: self.synthetic_manifest("ldm")?,
        })
    }

    fn classifier_file(spec: MixSpec, seed: u64) -> String {
        format!("clf_r{}_g{}_l{}_s{seed}", spec.real_n, spec.gan_n, spec.ldm_n)
    }

    fn grid_jobs(&self) -> Vec<(MixSpec, u64)> {
        let c = &self.config.classify;
        c.grid.iter().flat_map(|&spec| c.seeds.iter().map(move |&s| (spec, s))).collect()
    }

    fn train_classifiers(&self) -> PipelineResult<()> {
        let dir = self.stage_dir(StageName::TrainClf);
        let pools = self.pools()?;
        let loader = self.loader()?;
        let results = par_map(&self.grid_jobs(), self.jobs(), |&(spec, seed)| -> PipelineResult<()> {
            let started = Instant::now();
            let mix = build_mix(&pools, spec, seed)?;
            let examples = load_examples(&mix, &loader)?;
            let cfg = ClassifierConfig {
                seed,
                ..self.config.classifier.clone()
            };
            let (model, history) = train_classifier(&examples, &cfg)?;
            let name = Self::classifier_file(spec, seed);
            model.save(&dir.join(format!("{name}.ckpt")))?;
            write_json(&dir.join(format!("{name}_history.json")), &history)?;
            self.log(format!(
                "[train-clf] {name}: {} images, best epoch {} of {}, {:.1}s",
                examples.len(),
                history.best_epoch,
                history.stopped_epoch,
                started.elapsed().as_secs_f64()
            ));
            Ok(())
        });
        results.into_iter().collect()
    }

    fn test_sets(&self) -> PipelineResult<Vec<(String, Vec<Example>)>> {
        let loader = self.loader()?;
        let mut sets = vec![(
            "internal".to_string(),
            load_examples(&self.real_manifest()?.with_split(Split::Test), &loader)?,
        )];
        if let Some(ext) = self.external_manifest()? {
            sets.push(("external".to_string(), load_examples(&ext, &loader)?));
        }
        Ok(sets)
    }

    fn evaluate(&self) -> PipelineResult<()> {
        let c = &self.config.classify;
        let dir = self.stage_dir(StageName::Evaluate);
        let sets = self.test_sets()?;
        let clf_dir = self.stage_dir(StageName::TrainClf);
        let jobs = self.grid_jobs();
        let results = par_map(&jobs, self.jobs(), |&(spec, seed)| -> PipelineResult<Vec<GridRow>> {
            let model = Classifier::load(&clf_dir.join(format!("{}.ckpt", Self::classifier_file(spec, seed))))?;
            sets.iter()
                .map(|(name, examples)| {
                    Ok(GridRow {
                        spec,
                        seed,
                        test_set: name.clone(),
                        report: evaluate(&model, examples)?,
                    })
                })
                .collect()
        });
        let mut bundle = ReportBundle::default();
        for r in results {
            bundle.rows.extend(r?);
        }
        for &spec in &c.grid {
            for (name, _) in &sets {
                let reports: Vec<_> = bundle
                    .rows
                    .iter()
                    .filter(|r| r.spec == spec && &r.test_set == name)
                    .map(|r| r.report.clone())
                    .collect();
                bundle.aggregated.push(AggregatedRow {
                    spec,
                    test_set: name.clone(),
                    aggregate: aggregate_seeds(&reports, c.z, c.n_override)?,
                });
            }
        }
        write_json(&dir.join("bundle.json"), &bundle)
    }

    pub fn bundle(&self) -> PipelineResult<ReportBundle> {
        read_json(&self.stage_dir(StageName::Evaluate).join("bundle.json"))
    }

    fn report(&self) -> PipelineResult<()> {
        let dir = self.stage_dir(StageName::Report);
        let bundle = self.bundle()?;
        bundle.write(&dir)?;
        let fid_src = self.stage_dir(StageName::Select).join("fid.csv");
        fs::copy(&fid_src, dir.join("fid.csv")).map_err(io_err(&fid_src))?;
        let selected = self.selected()?;

        let mut sanity = Vec::new();
        for a in bundle.aggregated.iter().filter(|a| a.test_set == "internal") {
            if a.spec.gan_n + a.spec.ldm_n == 0 {
                continue;
            }
            let baseline = bundle.aggregate_for(MixSpec::new(a.spec.real_n, 0, 0), "internal");
            if let Some(b) = baseline {
                let delta = a.aggregate.accuracy.mean - b.accuracy.mean;
                sanity.push(SanityRow {
                    spec: a.spec,
                    accuracy_mean: a.aggregate.accuracy.mean,
                    baseline_mean: b.accuracy.mean,
                    delta,
                    within_band: delta.abs() <= SANITY_BAND,
                });
            }
        }
        let mut synthetic_per_stage = BTreeMap::new();
        for family in ["gan", "ldm"] {
            let m = self.synthetic_manifest(family)?;
            let min = Stage::ALL.iter().map(|&s| m.count(s)).min().unwrap_or(0);
            synthetic_per_stage.insert(family.to_string(), min);
        }
        let pool: EvalPool = read_json(&self.stage_dir(StageName::Generate).join("turing/pool.json"))?;
        let summary = RunSummary {
            synthetic_per_stage,
            selected,
            sanity_band: SANITY_BAND,
            all_within_band: sanity.iter().all(|r| r.within_band),
            sanity,
            turing_pool: pool.pool_id.clone(),
            turing_items: pool.len(),
        };
        write_json(&dir.join("summary.json"), &summary)?;
        fs::write(dir.join("summary.md"), render_summary(&bundle, &summary)).map_err(io_err(&dir))?;
        Ok(())
    }

    pub fn summary(&self) -> PipelineResult<RunSummary> {
        read_json(&self.stage_dir(StageName::Report).join("summary.json"))
    }

    /// Loads the generated pool into the service database, after checking
    /// that the generate stage and its prerequisites are fresh.
    pub fn prepare_service(&self) -> PipelineResult<(Store, String)> {
        let mut digests = BTreeMap::new();
        self.verify(StageName::Generate, &mut digests)
            .map_err(|reason| PipelineError::MissingDependency {
                stage: StageName::Serve,
                dependency: StageName::Generate,
                reason,
            })?;
        let tdir = self.stage_dir(StageName::Generate).join("turing");
        let pool: EvalPool = read_json(&tdir.join("pool.json"))?;
        let mut images = Vec::with_capacity(pool.len());
        for item in &pool.items {
            let img = GrayImage::load_png(&tdir.join("images").join(format!("{}.png", item.image_id)))?;
            images.push((item.image_id.clone(), img));
        }
        let db = self.resolve(&self.config.turing.database.display().to_string());
        let mut store = Store::open(&db)?;
        store.put_pool(&pool, &images)?;
        Ok((store, pool.pool_id))
    }
}

fn render_summary(bundle: &ReportBundle, summary: &RunSummary) -> String {
    use std::fmt::Write;
    let mut s = String::from("# Run summary\n\n## Selected checkpoints\n\n| stage | family | epoch | FID |\n|---|---|---|---|\n");
    for sel in &summary.selected {
        let _ = writeln!(s, "| {} | {} | {} | {:.4} |", sel.stage, sel.family, sel.epoch, sel.fid);
    }
    s.push_str("\n## Classification grid (mean ± CI over seeds)\n\n| real | gan | ldm | test set | accuracy | F1 | MCC |\n|---|---|---|---|---|---|---|\n");
    for a in &bundle.aggregated {
        let g = &a.aggregate;
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.3} [{:.3}, {:.3}] | {:.3} | {:.3} |",
            a.spec.real_n,
            a.spec.gan_n,
            a.spec.ldm_n,
            a.test_set,
            g.accuracy.mean,
            g.accuracy.ci_low,
            g.accuracy.ci_high,
            g.f1_macro.mean,
            g.mcc.mean
        );
    }
    let _ = write!(
        s,
        "\n## Sanity band (±{:.0} points of the real-only mix)\n\n",
        summary.sanity_band * 100.0
    );
    for r in &summary.sanity {
        let _ = writeln!(
            s,
            "- ({}, {}, {}): {:+.1} points, {}",
            r.spec.real_n,
            r.spec.gan_n,
            r.spec.ldm_n,
            r.delta * 100.0,
            if r.within_band { "inside" } else { "OUTSIDE" }
        );
    }
    let _ = writeln!(
        s,
        "\nTuring pool `{}`: {} images.",
        summary.turing_pool, summary.turing_items
    );
    s
}
