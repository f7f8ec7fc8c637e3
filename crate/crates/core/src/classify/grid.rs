use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::metrics::{aggregate_seeds, AggregatedReport, Metric, MetricsReport};
use super::model::{evaluate, train_classifier, ClassifierConfig, Example};
use super::{build_mix, load_examples, ImageLoader, MixPools, MixSpec};

/// A named evaluation set, e.g. the internal held-out images or the
/// external blastocyst collection.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub name: String,
    pub examples: Vec<Example>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    pub z: f64,
    /// Replaces the seed count inside interval widths.
    pub n_override: Option<usize>,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions { z: 1.96, n_override: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub spec: MixSpec,
    pub seed: u64,
    pub test_set: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedRow {
    pub spec: MixSpec,
    pub test_set: String,
    pub aggregate: AggregatedReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub rows: Vec<GridRow>,
    pub aggregated: Vec<AggregatedRow>,
}

impl ReportBundle {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn test_sets(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.test_set) {
                names.push(r.test_set.clone());
            }
        }
        names
    }

    pub fn aggregate_for(&self, spec: MixSpec, test_set: &str) -> Option<&AggregatedReport> {
        self.aggregated
            .iter()
            .find(|a| a.spec == spec && a.test_set == test_set)
            .map(|a| &a.aggregate)
    }

    /// Writes `grid_<test set>.csv` per test set, `grid_aggregated.csv`
    /// and `grid.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for name in self.test_sets() {
            let rows: Vec<&GridRow> = self.rows.iter().filter(|r| r.test_set == name).collect();
            write_grid_csv(&dir.join(format!("grid_{name}.csv")), &rows)?;
        }
        write_aggregated_csv(&dir.join("grid_aggregated.csv"), &self.aggregated)?;
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        let path = dir.join("grid.json");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

/// Trains one classifier per `(spec, seed)` and evaluates it on every test
/// set, then aggregates across seeds.
pub fn run_grid(
    grid: &[MixSpec],
    config: &ClassifierConfig,
    seeds: &[u64],
    pools: &MixPools,
    loader: &dyn ImageLoader,
    test_sets: &[TestSet],
    options: GridOptions,
) -> Result<ReportBundle> {
    if grid.is_empty() {
        return Ok(ReportBundle::default());
    }
    if seeds.len() < 2 {
        return Err(Error::Invalid(format!("a grid needs at least 2 seeds, got {}", seeds.len())));
    }
    if test_sets.is_empty() {
        return Err(Error::Empty("test sets"));
    }
    let mut bundle = ReportBundle::default();
    for &spec in grid {
        let mut per_set: Vec<Vec<MetricsReport>> = vec![Vec::new(); test_sets.len()];
        for &seed in seeds {
            let mix = build_mix(pools, spec, seed)?;
            let examples = load_examples(&mix, loader)?;
            let cfg = ClassifierConfig {
                seed,
                ..config.clone()
            };
            let (model, _) = train_classifier(&examples, &cfg)?;
            for (t, set) in test_sets.iter().enumerate() {
                let report = evaluate(&model, &set.examples)?;
                per_set[t].push(report.clone());
                bundle.rows.push(GridRow {
                    spec,
                    seed,
                    test_set: set.name.clone(),
                    report,
                });
            }
        }
        for (set, reports) in test_sets.iter().zip(per_set) {
            bundle.aggregated.push(AggregatedRow {
                spec,
                test_set: set.name.clone(),
                aggregate: aggregate_seeds(&reports, options.z, options.n_override)?,
            });
        }
    }
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GridCsvRow {
    spec_real: usize,
    spec_gan: usize,
    spec_ldm: usize,
    seed: u64,
    accuracy: f64,
    f1: f64,
    precision: f64,
    recall: f64,
    mcc: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// One line per `(spec, seed)`:
/// `spec_real,spec_gan,spec_ldm,seed,accuracy,f1,precision,recall,mcc`.
pub fn write_grid_csv(path: &Path, rows: &[&GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(GridCsvRow {
            spec_real: r.spec.real_n,
            spec_gan: r.spec.gan_n,
            spec_ldm: r.spec.ldm_n,
            seed: r.seed,
            accuracy: r.report.accuracy,
            f1: r.report.f1_macro,
            precision: r.report.precision_macro,
            recall: r.report.recall_macro,
            mcc: r.report.mcc,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads back `(spec, seed, [accuracy, f1, precision, recall, mcc])`.
pub fn read_grid_csv(path: &Path) -> Result<Vec<(MixSpec, u64, [f64; 5])>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize::<GridCsvRow>()
        .map(|row| {
            let row = row.map_err(|e| csv_err(path, e))?;
            Ok((
                MixSpec::new(row.spec_real, row.spec_gan, row.spec_ldm),
                row.seed,
                [row.accuracy, row.f1, row.precision, row.recall, row.mcc],
            ))
        })
        .collect()
}

#[derive(Serialize)]
struct AggregatedCsvRow<'a> {
    spec_real: usize,
    spec_gan: usize,
    spec_ldm: usize,
    test_set: &'a str,
    metric: &'static str,
    seeds: usize,
    mean: f64,
    std: f64,
    z: f64,
    n: usize,
    ci_low: f64,
    ci_high: f64,
}

/// Long format: one line per `(spec, test set, metric)`.
pub fn write_aggregated_csv(path: &Path, rows: &[AggregatedRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        for m in Metric::ALL {
            let s = r.aggregate.summary(m);
            w.serialize(AggregatedCsvRow {
                spec_real: r.spec.real_n,
                spec_gan: r.spec.gan_n,
                spec_ldm: r.spec.ldm_n,
                test_set: &r.test_set,
                metric: m.as_str(),
                seeds: r.aggregate.reports,
                mean: s.mean,
                std: s.std,
                z: s.z,
                n: s.n,
                ci_low: s.ci_low,
                ci_high: s.ci_high,
            })
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
