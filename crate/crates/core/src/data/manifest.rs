use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Stage;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Volvat,
    TlvPublic,
    External,
    SyntheticGan,
    SyntheticLdm,
    Toy,
}

impl Source {
    pub fn is_synthetic(self) -> bool {
        matches!(self, Source::SyntheticGan | Source::SyntheticLdm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    #[default]
    Unassigned,
}

/// Quality grade attached to the external blastocyst images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Good,
    Fair,
    Poor,
}

impl std::str::FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "good" | "good-quality" => Ok(Quality::Good),
            "fair" | "fair-quality" => Ok(Quality::Fair),
            "poor" | "poor-quality" => Ok(Quality::Poor),
            other => Err(Error::Invalid(format!("unknown quality label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub sequence_id: String,
    pub stage: Stage,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hours_post_fertilization: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fragmentation_pct: Option<f64>,
    pub path: String,
    #[serde(default)]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<Quality>,
}

impl ImageRecord {
    pub fn new(
        image_id: impl Into<String>,
        sequence_id: impl Into<String>,
        stage: Stage,
        source: Source,
        path: impl Into<String>,
    ) -> Self {
        ImageRecord {
            image_id: image_id.into(),
            sequence_id: sequence_id.into(),
            stage,
            source,
            hours_post_fertilization: None,
            fragmentation_pct: None,
            path: path.into(),
            split: Split::Unassigned,
            quality: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(h) = self.hours_post_fertilization {
            if self.source.is_synthetic() {
                return Err(Error::Invalid(format!(
                    "synthetic record `{}` carries a fertilization time",
                    self.image_id
                )));
            }
            if !(h >= 0.0 && h.is_finite()) {
                return Err(Error::Invalid(format!(
                    "record `{}` has invalid hours_post_fertilization {h}",
                    self.image_id
                )));
            }
        }
        if let Some(f) = self.fragmentation_pct {
            if !(0.0..=100.0).contains(&f) {
                return Err(Error::Invalid(format!(
                    "record `{}` has fragmentation {f} outside [0, 100]",
                    self.image_id
                )));
            }
        }
        Ok(())
    }
}

/// Catalog of labeled images.
///
/// `stage_counts` always holds all five stages and is kept consistent with
/// `records` by every constructor.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    records: Vec<ImageRecord>,
    stage_counts: BTreeMap<Stage, usize>,
    pub provenance: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    provenance: String,
    record_count: usize,
    stage_counts: BTreeMap<Stage, usize>,
}

impl DatasetManifest {
    pub fn empty(provenance: impl Into<String>) -> Self {
        Self::from_records_unchecked(Vec::new(), provenance.into())
    }

    /// Builds a manifest, checking id uniqueness, per-record field ranges and
    /// train/test sequence disjointness.
    pub fn new(records: Vec<ImageRecord>, provenance: impl Into<String>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate()?;
            if !ids.insert(r.image_id.as_str()) {
                return Err(Error::Invalid(format!("duplicate image_id `{}`", r.image_id)));
            }
        }
        let m = Self::from_records_unchecked(records, provenance.into());
        if let Some(seq) = m.leaked_sequences().into_iter().next() {
            return Err(Error::Invalid(format!(
                "sequence `{seq}` appears in both train and test splits"
            )));
        }
        Ok(m)
    }

    pub(crate) fn from_records_unchecked(records: Vec<ImageRecord>, provenance: String) -> Self {
        let mut stage_counts: BTreeMap<Stage, usize> = Stage::ALL.iter().map(|s| (*s, 0)).collect();
        for r in &records {
            *stage_counts.entry(r.stage).or_default() += 1;
        }
        DatasetManifest {
            records,
            stage_counts,
            provenance,
        }
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ImageRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn stage_counts(&self) -> &BTreeMap<Stage, usize> {
        &self.stage_counts
    }

    pub fn count(&self, stage: Stage) -> usize {
        self.stage_counts.get(&stage).copied().unwrap_or(0)
    }

    /// Number of records for a `(stage, source)` pair.
    pub fn count_by_source(&self, stage: Stage, source: Source) -> usize {
        self.records
            .iter()
            .filter(|r| r.stage == stage && r.source == source)
            .count()
    }

    pub fn with_split(&self, split: Split) -> DatasetManifest {
        let records = self.records.iter().filter(|r| r.split == split).cloned().collect();
        Self::from_records_unchecked(records, self.provenance.clone())
    }

    pub fn of_stage(&self, stage: Stage) -> Vec<&ImageRecord> {
        self.records.iter().filter(|r| r.stage == stage).collect()
    }

    /// Returns a new manifest keeping records for which `keep` is true.
    pub fn filtered(&self, mut keep: impl FnMut(&ImageRecord) -> bool) -> DatasetManifest {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Self::from_records_unchecked(records, self.provenance.clone())
    }

    /// Sequence ids present in both the train and the test split.
    pub fn leaked_sequences(&self) -> BTreeSet<String> {
        let train: HashSet<&str> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.sequence_id.as_str())
            .collect();
        self.records
            .iter()
            .filter(|r| r.split == Split::Test && train.contains(r.sequence_id.as_str()))
            .map(|r| r.sequence_id.clone())
            .collect()
    }

    /// Concatenates manifests; the result is re-validated.
    pub fn concat(parts: &[&DatasetManifest], provenance: impl Into<String>) -> Result<Self> {
        let records = parts.iter().flat_map(|m| m.records.iter().cloned()).collect();
        Self::new(records, provenance)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = Header {
            kind: "header".into(),
            provenance: self.provenance.clone(),
            record_count: self.records.len(),
            stage_counts: self.stage_counts.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let header: Header = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::Manifest {
                    line: 1,
                    message: e.to_string(),
                })?;
                serde_json::from_str(&line).map_err(|e| Error::Manifest {
                    line: 1,
                    message: e.to_string(),
                })?
            }
            None => {
                return Err(Error::Manifest {
                    line: 1,
                    message: "missing header".into(),
                })
            }
        };
        if header.kind != "header" {
            return Err(Error::Manifest {
                line: 1,
                message: format!("expected header object, got kind `{}`", header.kind),
            });
        }
        let mut records = Vec::with_capacity(header.record_count);
        for (i, line) in lines {
            let line = line.map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ImageRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        if records.len() != header.record_count {
            return Err(Error::Manifest {
                line: 1,
                message: format!(
                    "header declares {} records, found {}",
                    header.record_count,
                    records.len()
                ),
            });
        }
        let m = DatasetManifest::new(records, header.provenance)?;
        for stage in Stage::ALL {
            let declared = header.stage_counts.get(&stage).copied().unwrap_or(0);
            if declared != m.count(stage) {
                return Err(Error::Manifest {
                    line: 1,
                    message: format!(
                        "header stage count for {stage} is {declared}, records give {}",
                        m.count(stage)
                    ),
                });
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_jsonl(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, seq: &str, stage: Stage) -> ImageRecord {
        ImageRecord::new(id, seq, stage, Source::Volvat, format!("{stage}/{id}.png"))
    }

    #[test]
    fn stage_counts_track_records() {
        let m = DatasetManifest::new(
            vec![
                rec("a", "s1", Stage::TwoCell),
                rec("b", "s1", Stage::FourCell),
                rec("c", "s2", Stage::TwoCell),
            ],
            "test",
        )
        .unwrap();
        assert_eq!(m.count(Stage::TwoCell), 2);
        assert_eq!(m.count(Stage::FourCell), 1);
        assert_eq!(m.count(Stage::Blastocyst), 0);
        assert_eq!(m.stage_counts().len(), 5);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = DatasetManifest::new(
            vec![rec("a", "s1", Stage::TwoCell), rec("a", "s2", Stage::TwoCell)],
            "",
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn synthetic_records_cannot_carry_hours() {
        let mut r = ImageRecord::new("g", "g", Stage::Morula, Source::SyntheticGan, "g.png");
        r.hours_post_fertilization = Some(90.0);
        assert!(DatasetManifest::new(vec![r], "").is_err());
    }

    #[test]
    fn leakage_rejected() {
        let mut a = rec("a", "s1", Stage::TwoCell);
        a.split = Split::Train;
        let mut b = rec("b", "s1", Stage::FourCell);
        b.split = Split::Test;
        assert!(DatasetManifest::new(vec![a, b], "").is_err());
    }

    #[test]
    fn header_count_mismatch_rejected() {
        let m = DatasetManifest::new(vec![rec("a", "s1", Stage::TwoCell)], "x").unwrap();
        let text = m.to_jsonl_string();
        let truncated: String = text.lines().take(1).map(|l| format!("{l}\n")).collect();
        assert!(DatasetManifest::read_jsonl(truncated.as_bytes()).is_err());
    }

    fn arb_record() -> impl Strategy<Value = ImageRecord> {
        (
            0usize..5,
            0usize..6,
            prop::option::of(0.0f64..200.0),
            prop::option::of(0.0f64..100.0),
            0usize..3,
            "[a-z]{1,6}",
        )
            .prop_map(|(st, src, hours, frag, split, seq)| {
                let source = [
                    Source::Volvat,
                    Source::TlvPublic,
                    Source::External,
                    Source::SyntheticGan,
                    Source::SyntheticLdm,
                    Source::Toy,
                ][src];
                let mut r = ImageRecord::new("", seq, Stage::ALL[st], source, "p.png");
                r.hours_post_fertilization = if source.is_synthetic() { None } else { hours };
                r.fragmentation_pct = frag;
                r.split = [Split::Train, Split::Unassigned, Split::Unassigned][split];
                r
            })
    }

    proptest! {
        #[test]
        fn jsonl_round_trip(mut records in prop::collection::vec(arb_record(), 0..40)) {
            for (i, r) in records.iter_mut().enumerate() {
                r.image_id = format!("img{i}");
            }
            let m = DatasetManifest::new(records, "prop \"quoted\"\nnote").unwrap();
            let parsed = DatasetManifest::read_jsonl(m.to_jsonl_string().as_bytes()).unwrap();
            prop_assert_eq!(parsed, m);
        }
    }
}
