use std::collections::BTreeMap;

use super::{DatasetManifest, ImageRecord, Source, Stage};
use crate::error::{Error, Result};

/// One extracted time-lapse frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub sequence_id: String,
    pub timestamp_hours: f64,
    pub path: String,
}

impl Frame {
    pub fn new(sequence_id: impl Into<String>, timestamp_hours: f64, path: impl Into<String>) -> Self {
        Frame {
            sequence_id: sequence_id.into(),
            timestamp_hours,
            path: path.into(),
        }
    }
}

/// Annotated start of a stage, in hours post-fertilization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageOnset {
    pub stage: Stage,
    pub onset_hours: f64,
}

impl StageOnset {
    pub fn new(stage: Stage, onset_hours: f64) -> Self {
        StageOnset { stage, onset_hours }
    }
}

/// Labels frames with the stage whose onset interval `[onset_i, onset_{i+1})`
/// contains the frame time.
///
/// Frames before the first onset, and frames of sequences without
/// annotations, are dropped. `fragmentation` holds per-sequence rates where
/// known. Image ids are `<sequence_id>_<index>` with the index counting the
/// sequence's frames in time order.
pub fn build_manifest(
    frames: &[Frame],
    annotations: &BTreeMap<String, Vec<StageOnset>>,
    fragmentation: &BTreeMap<String, f64>,
    source: Source,
) -> Result<DatasetManifest> {
    for (seq, onsets) in annotations {
        let sorted = onsets
            .windows(2)
            .all(|w| w[0].onset_hours < w[1].onset_hours);
        if !sorted || onsets.iter().any(|o| !o.onset_hours.is_finite()) {
            return Err(Error::UnsortedAnnotations {
                sequence_id: seq.clone(),
            });
        }
    }

    let mut by_sequence: BTreeMap<&str, Vec<&Frame>> = BTreeMap::new();
    for f in frames {
        by_sequence.entry(f.sequence_id.as_str()).or_default().push(f);
    }

    let mut records = Vec::new();
    for (seq, mut seq_frames) in by_sequence {
        let Some(onsets) = annotations.get(seq) else {
            continue;
        };
        seq_frames.sort_by(|a, b| a.timestamp_hours.total_cmp(&b.timestamp_hours));
        for (index, frame) in seq_frames.iter().enumerate() {
            let t = frame.timestamp_hours;
            // last onset <= t
            let k = onsets.partition_point(|o| o.onset_hours <= t);
            if k == 0 {
                continue;
            }
            let mut rec = ImageRecord::new(
                format!("{seq}_{index:04}"),
                seq,
                onsets[k - 1].stage,
                source,
                frame.path.clone(),
            );
            rec.hours_post_fertilization = Some(t);
            rec.fragmentation_pct = fragmentation.get(seq).copied();
            records.push(rec);
        }
    }
    DatasetManifest::new(records, format!("built from {} frames", frames.len()))
}

/// Drops records whose fragmentation exceeds `threshold_pct`, and records
/// with unknown fragmentation. A record exactly at the threshold is kept.
pub fn filter_fragmentation(manifest: &DatasetManifest, threshold_pct: f64) -> DatasetManifest {
    manifest.filtered(|r| matches!(r.fragmentation_pct, Some(f) if f <= threshold_pct))
}

/// Keeps one frame per `(sequence, stage)`: the temporally middle one
/// (lower middle for an even count). Records without a timestamp are
/// ordered by image id.
pub fn select_representative_frames(manifest: &DatasetManifest) -> DatasetManifest {
    let mut groups: BTreeMap<(&str, Stage), Vec<&ImageRecord>> = BTreeMap::new();
    for r in manifest.records() {
        groups.entry((r.sequence_id.as_str(), r.stage)).or_default().push(r);
    }
    let mut keep = std::collections::HashSet::new();
    for (_, mut group) in groups {
        group.sort_by(|a, b| {
            let ta = a.hours_post_fertilization.unwrap_or(f64::NAN);
            let tb = b.hours_post_fertilization.unwrap_or(f64::NAN);
            ta.total_cmp(&tb).then_with(|| a.image_id.cmp(&b.image_id))
        });
        keep.insert(group[(group.len() - 1) / 2].image_id.clone());
    }
    manifest.filtered(|r| keep.contains(&r.image_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(seq: &str, onsets: &[(Stage, f64)]) -> BTreeMap<String, Vec<StageOnset>> {
        let mut m = BTreeMap::new();
        m.insert(
            seq.to_string(),
            onsets.iter().map(|(s, t)| StageOnset::new(*s, *t)).collect(),
        );
        m
    }

    #[test]
    fn frame_inside_interval_takes_that_stage() {
        let a = ann("e1", &[(Stage::TwoCell, 26.0), (Stage::FourCell, 38.0)]);
        let frames = [Frame::new("e1", 30.0, "e1/f30.png")];
        let m = build_manifest(&frames, &a, &BTreeMap::new(), Source::Volvat).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.records()[0].stage, Stage::TwoCell);
    }

    #[test]
    fn interval_is_half_open() {
        let a = ann("e1", &[(Stage::TwoCell, 26.0), (Stage::FourCell, 38.0)]);
        let frames = [
            Frame::new("e1", 25.9, "a.png"),
            Frame::new("e1", 26.0, "b.png"),
            Frame::new("e1", 38.0, "c.png"),
            Frame::new("e1", 120.0, "d.png"),
        ];
        let m = build_manifest(&frames, &a, &BTreeMap::new(), Source::Volvat).unwrap();
        let stages: Vec<_> = m.records().iter().map(|r| r.stage).collect();
        assert_eq!(stages, vec![Stage::TwoCell, Stage::FourCell, Stage::FourCell]);
    }

    #[test]
    fn empty_frames_give_empty_manifest() {
        let a = ann("e1", &[(Stage::TwoCell, 26.0)]);
        let m = build_manifest(&[], &a, &BTreeMap::new(), Source::Volvat).unwrap();
        assert!(m.is_empty());
        assert!(m.stage_counts().values().all(|&c| c == 0));
        assert_eq!(m.stage_counts().len(), 5);
    }

    #[test]
    fn unannotated_sequences_dropped() {
        let a = ann("e1", &[(Stage::TwoCell, 26.0)]);
        let frames = [Frame::new("e2", 30.0, "x.png")];
        let m = build_manifest(&frames, &a, &BTreeMap::new(), Source::Volvat).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn unsorted_or_duplicate_onsets_name_the_sequence() {
        for onsets in [
            vec![(Stage::FourCell, 38.0), (Stage::TwoCell, 26.0)],
            vec![(Stage::TwoCell, 26.0), (Stage::FourCell, 26.0)],
        ] {
            let a = ann("bad-seq", &onsets);
            match build_manifest(&[], &a, &BTreeMap::new(), Source::Volvat) {
                Err(Error::UnsortedAnnotations { sequence_id }) => assert_eq!(sequence_id, "bad-seq"),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn fragmentation_filter_boundaries() {
        let mut recs = Vec::new();
        for (i, frag) in [Some(16.0), None, Some(0.0), Some(15.0)].into_iter().enumerate() {
            let mut r = ImageRecord::new(format!("r{i}"), format!("s{i}"), Stage::TwoCell, Source::Volvat, "p");
            r.fragmentation_pct = frag;
            recs.push(r);
        }
        let m = DatasetManifest::new(recs, "").unwrap();
        let f = filter_fragmentation(&m, 15.0);
        let ids: Vec<_> = f.records().iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids, vec!["r2", "r3"]);
        assert_eq!(f.count(Stage::TwoCell), 2);
        assert_eq!(filter_fragmentation(&f, 15.0), f);
    }

    #[test]
    fn representative_frame_is_temporal_middle() {
        let a = ann("e1", &[(Stage::TwoCell, 26.0), (Stage::FourCell, 38.0)]);
        let frames: Vec<_> = [27.0, 28.0, 29.0, 39.0, 40.0]
            .iter()
            .map(|t| Frame::new("e1", *t, format!("f{t}.png")))
            .collect();
        let m = build_manifest(&frames, &a, &BTreeMap::new(), Source::Volvat).unwrap();
        let rep = select_representative_frames(&m);
        let times: Vec<_> = rep
            .records()
            .iter()
            .map(|r| (r.stage, r.hours_post_fertilization.unwrap()))
            .collect();
        assert_eq!(times, vec![(Stage::TwoCell, 28.0), (Stage::FourCell, 39.0)]);
    }
}
