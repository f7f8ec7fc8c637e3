use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, Split, Stage};
use crate::error::{Error, Result};

/// Assigns exactly `train_per_stage` train and `test_per_stage` test records
/// to every stage, keeping whole sequences on one side of the split.
///
/// Sequences are visited in a seeded random order. The test side is filled
/// first; a sequence chosen for a side contributes every record whose stage
/// quota on that side is still open, and its remaining records stay
/// unassigned. Input splits are discarded.
pub fn split_sequences(
    manifest: &DatasetManifest,
    train_per_stage: usize,
    test_per_stage: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let mut seen = HashSet::new();
    for r in manifest.records() {
        if !seen.insert((r.sequence_id.as_str(), r.stage)) {
            return Err(Error::DuplicateFrame {
                sequence_id: r.sequence_id.clone(),
                stage: r.stage,
            });
        }
    }
    let needed = train_per_stage + test_per_stage;
    for stage in Stage::ALL {
        let available = manifest.count(stage);
        if available < needed {
            return Err(Error::InsufficientStage {
                stage,
                needed,
                available,
            });
        }
    }

    let mut records = manifest.records().to_vec();
    let mut by_sequence: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter_mut().enumerate() {
        r.split = Split::Unassigned;
        by_sequence.entry(r.sequence_id.clone()).or_default().push(i);
    }
    let mut order: Vec<Vec<usize>> = by_sequence.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut used = vec![false; order.len()];
    for (side, quota) in [(Split::Test, test_per_stage), (Split::Train, train_per_stage)] {
        let mut filled = [0usize; 5];
        for (seq_idx, members) in order.iter().enumerate() {
            if used[seq_idx] {
                continue;
            }
            let wanted = members
                .iter()
                .any(|&i| filled[records[i].stage.ordinal()] < quota);
            if !wanted {
                continue;
            }
            used[seq_idx] = true;
            for &i in members {
                let k = records[i].stage.ordinal();
                if filled[k] < quota {
                    filled[k] += 1;
                    records[i].split = side;
                }
            }
        }
        for stage in Stage::ALL {
            let got = filled[stage.ordinal()];
            if got < quota {
                return Err(Error::InsufficientStage {
                    stage,
                    needed: quota,
                    available: got,
                });
            }
        }
    }

    let provenance = format!(
        "{}; sequence split train={train_per_stage} test={test_per_stage} seed={seed}",
        manifest.provenance
    );
    Ok(DatasetManifest::from_records_unchecked(records, provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageRecord, Source};

    /// `n` sequences, each with one frame per stage.
    fn corpus(n: usize) -> DatasetManifest {
        let mut recs = Vec::new();
        for s in 0..n {
            for stage in Stage::ALL {
                recs.push(ImageRecord::new(
                    format!("seq{s}-{stage}"),
                    format!("seq{s}"),
                    stage,
                    Source::Toy,
                    "p.png",
                ));
            }
        }
        DatasetManifest::new(recs, "corpus").unwrap()
    }

    #[test]
    fn exact_quotas_and_no_leakage() {
        let m = corpus(30);
        let s = split_sequences(&m, 20, 5, 3).unwrap();
        for stage in Stage::ALL {
            let train = s.records().iter().filter(|r| r.stage == stage && r.split == Split::Train).count();
            let test = s.records().iter().filter(|r| r.stage == stage && r.split == Split::Test).count();
            assert_eq!((train, test), (20, 5));
        }
        assert!(s.leaked_sequences().is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let m = corpus(30);
        let a = split_sequences(&m, 20, 5, 11).unwrap();
        let b = split_sequences(&m, 20, 5, 11).unwrap();
        assert_eq!(a.to_jsonl_string(), b.to_jsonl_string());
        let c = split_sequences(&m, 20, 5, 12).unwrap();
        assert_ne!(a.to_jsonl_string(), c.to_jsonl_string());
    }

    #[test]
    fn insufficient_stage_is_named() {
        let m = corpus(10);
        let m = m.filtered(|r| !(r.stage == Stage::Morula && r.sequence_id == "seq0"));
        match split_sequences(&m, 8, 2, 0) {
            Err(Error::InsufficientStage { stage, needed, available }) => {
                assert_eq!((stage, needed, available), (Stage::Morula, 10, 9));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_frame_per_sequence_stage_rejected() {
        let recs = vec![
            ImageRecord::new("a", "s", Stage::TwoCell, Source::Toy, "a"),
            ImageRecord::new("b", "s", Stage::TwoCell, Source::Toy, "b"),
        ];
        let m = DatasetManifest::new(recs, "").unwrap();
        assert!(matches!(split_sequences(&m, 1, 0, 0), Err(Error::DuplicateFrame { .. })));
    }
}
