use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Stage;
use crate::error::{Error, Result};

use super::pool::{EvalPool, TrueSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judgment {
    Real,
    Fake,
}

/// Axis-aligned rectangle in image pixels, with an optional note.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionAnnotation {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl RegionAnnotation {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let (wd, ht) = (width as i64, height as i64);
        if self.w <= 0 || self.h <= 0 {
            return Err(Error::Invalid(format!("region {}x{} must have positive size", self.w, self.h)));
        }
        if self.x < 0 || self.y < 0 || self.x + self.w > wd || self.y + self.h > ht {
            return Err(Error::Invalid(format!(
                "region ({}, {}, {}, {}) exceeds the {width}x{height} image",
                self.x, self.y, self.w, self.h
            )));
        }
        Ok(())
    }
}

/// A rater's submission for one presented image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verdict {
    pub image_id: String,
    pub judgment: Judgment,
    #[serde(default)]
    pub regions: Vec<RegionAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
}

/// A stored verdict with its session context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub session_id: String,
    pub rater_id: String,
    pub verdict: Verdict,
    /// Milliseconds since the Unix epoch.
    pub submitted_at_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: u64,
    pub incorrect: u64,
}

impl Tally {
    pub fn total(&self) -> u64 {
        self.correct + self.incorrect
    }

    /// `None` when no verdicts were counted.
    pub fn accuracy(&self) -> Option<f64> {
        (self.total() > 0).then(|| self.correct as f64 / self.total() as f64)
    }

    fn add(&mut self, correct: bool) {
        if correct {
            self.correct += 1;
        } else {
            self.incorrect += 1;
        }
    }
}

/// Whether `judgment` identifies the true origin: real images judged real,
/// synthetic images judged fake.
pub fn is_correct(source: TrueSource, judgment: Judgment) -> bool {
    matches!(
        (source, judgment),
        (TrueSource::Real, Judgment::Real) | (TrueSource::Gan | TrueSource::Ldm, Judgment::Fake)
    )
}

/// Mean of the given rates, each counted once.
pub fn equal_weight(rates: &[f64]) -> f64 {
    rates.iter().sum::<f64>() / rates.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: Stage,
    pub real: Tally,
    pub gan: Tally,
    pub ldm: Tally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub verdicts: u64,
    pub real: Tally,
    pub gan: Tally,
    pub ldm: Tally,
    /// Pooled over both synthetic sources.
    pub synthetic: Tally,
    /// Mean of the adversarial and diffusion detection rates.
    pub synthetic_equal_weight: Option<f64>,
    pub by_stage: Vec<StageRow>,
}

impl Breakdown {
    fn new() -> Self {
        Breakdown {
            verdicts: 0,
            real: Tally::default(),
            gan: Tally::default(),
            ldm: Tally::default(),
            synthetic: Tally::default(),
            synthetic_equal_weight: None,
            by_stage: Stage::ALL
                .iter()
                .map(|&stage| StageRow {
                    stage,
                    real: Tally::default(),
                    gan: Tally::default(),
                    ldm: Tally::default(),
                })
                .collect(),
        }
    }

    fn add(&mut self, source: TrueSource, stage: Stage, correct: bool) {
        self.verdicts += 1;
        let row = &mut self.by_stage[stage.ordinal()];
        match source {
            TrueSource::Real => {
                self.real.add(correct);
                row.real.add(correct);
            }
            TrueSource::Gan => {
                self.gan.add(correct);
                self.synthetic.add(correct);
                row.gan.add(correct);
            }
            TrueSource::Ldm => {
                self.ldm.add(correct);
                self.synthetic.add(correct);
                row.ldm.add(correct);
            }
        }
    }

    fn finish(&mut self) {
        self.synthetic_equal_weight = match (self.gan.accuracy(), self.ldm.accuracy()) {
            (Some(g), Some(l)) => Some(equal_weight(&[g, l])),
            _ => None,
        };
    }

    pub fn tally(&self, source: TrueSource) -> &Tally {
        match source {
            TrueSource::Real => &self.real,
            TrueSource::Gan => &self.gan,
            TrueSource::Ldm => &self.ldm,
        }
    }
}

/// Accuracy per category averaged across raters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterAverage {
    pub real: Option<f64>,
    pub gan: Option<f64>,
    pub ldm: Option<f64>,
    pub synthetic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterBreakdown {
    pub rater_id: String,
    pub breakdown: Breakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieSlice {
    pub source: TrueSource,
    pub correct: bool,
    pub count: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuringReport {
    pub pool_id: String,
    /// All verdicts pooled.
    pub overall: Breakdown,
    pub per_rater: Vec<RaterBreakdown>,
    /// Unweighted mean over raters who judged the category.
    pub rater_mean: RaterAverage,
    /// Mean over raters weighted by their verdict count in the category.
    pub rater_weighted: RaterAverage,
    pub pie: Vec<PieSlice>,
}

fn average(per_rater: &[RaterBreakdown], pick: fn(&Breakdown) -> &Tally, weighted: bool) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for r in per_rater {
        let t = pick(&r.breakdown);
        if let Some(acc) = t.accuracy() {
            let w = if weighted { t.total() as f64 } else { 1.0 };
            num += w * acc;
            den += w;
        }
    }
    (den > 0.0).then(|| num / den)
}

fn rater_average(per_rater: &[RaterBreakdown], weighted: bool) -> RaterAverage {
    RaterAverage {
        real: average(per_rater, |b| &b.real, weighted),
        gan: average(per_rater, |b| &b.gan, weighted),
        ldm: average(per_rater, |b| &b.ldm, weighted),
        synthetic: average(per_rater, |b| &b.synthetic, weighted),
    }
}

/// Scores every verdict against the pool's true sources.
pub fn aggregate_results(verdicts: &[VerdictRecord], pool: &EvalPool) -> Result<TuringReport> {
    let lookup: BTreeMap<&str, _> = pool.items.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let mut overall = Breakdown::new();
    let mut raters: BTreeMap<&str, Breakdown> = BTreeMap::new();
    for v in verdicts {
        let item = lookup
            .get(v.verdict.image_id.as_str())
            .ok_or_else(|| Error::UnknownImage(v.verdict.image_id.clone()))?;
        let correct = is_correct(item.true_source, v.verdict.judgment);
        overall.add(item.true_source, item.stage, correct);
        raters
            .entry(v.rater_id.as_str())
            .or_insert_with(Breakdown::new)
            .add(item.true_source, item.stage, correct);
    }
    overall.finish();
    let per_rater: Vec<RaterBreakdown> = raters
        .into_iter()
        .map(|(rater_id, mut breakdown)| {
            breakdown.finish();
            RaterBreakdown {
                rater_id: rater_id.into(),
                breakdown,
            }
        })
        .collect();
    let mut pie = Vec::new();
    for source in TrueSource::ALL {
        let t = overall.tally(source);
        for (correct, count) in [(true, t.correct), (false, t.incorrect)] {
            pie.push(PieSlice {
                source,
                correct,
                count,
                fraction: if t.total() == 0 { 0.0 } else { count as f64 / t.total() as f64 },
            });
        }
    }
    Ok(TuringReport {
        pool_id: pool.pool_id.clone(),
        rater_mean: rater_average(&per_rater, false),
        rater_weighted: rater_average(&per_rater, true),
        overall,
        per_rater,
        pie,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationFilter {
    pub source: Option<TrueSource>,
    pub rater_id: Option<String>,
    pub stage: Option<Stage>,
}

/// One marked region, or a comment left without any region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub image_id: String,
    pub true_source: TrueSource,
    pub stage: Stage,
    pub judgment: Judgment,
    pub rater_id: String,
    pub session_id: String,
    pub region: Option<RegionAnnotation>,
    pub comment: Option<String>,
}

/// Number of annotations a verdict carries: its regions, or one for a bare
/// comment.
pub fn annotation_count(v: &Verdict) -> usize {
    if v.regions.is_empty() {
        v.comment.is_some() as usize
    } else {
        v.regions.len()
    }
}

pub fn export_annotations(
    verdicts: &[VerdictRecord],
    pool: &EvalPool,
    filter: &AnnotationFilter,
) -> Result<Vec<AnnotationRow>> {
    let mut rows = Vec::new();
    for v in verdicts {
        let item = pool
            .item(&v.verdict.image_id)
            .ok_or_else(|| Error::UnknownImage(v.verdict.image_id.clone()))?;
        if filter.source.is_some_and(|s| s != item.true_source)
            || filter.stage.is_some_and(|s| s != item.stage)
            || filter.rater_id.as_ref().is_some_and(|r| r != &v.rater_id)
        {
            continue;
        }
        let row = |region: Option<RegionAnnotation>| AnnotationRow {
            image_id: item.image_id.clone(),
            true_source: item.true_source,
            stage: item.stage,
            judgment: v.verdict.judgment,
            rater_id: v.rater_id.clone(),
            session_id: v.session_id.clone(),
            region,
            comment: v.verdict.comment.clone(),
        };
        if v.verdict.regions.is_empty() {
            if v.verdict.comment.is_some() {
                rows.push(row(None));
            }
        } else {
            rows.extend(v.verdict.regions.iter().cloned().map(|r| row(Some(r))));
        }
    }
    Ok(rows)
}
