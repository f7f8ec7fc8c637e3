//! Embryo image catalogs.
//!
//! A [`DatasetManifest`] lists labeled frames drawn from time-lapse sequences.
//! Manifests are built from per-sequence stage annotations
//! ([`build_manifest`]), filtered on fragmentation ([`filter_fragmentation`]),
//! and split into train/test sets at the sequence level
//! ([`split_sequences`]) so that no embryo contributes to both sides.
//!
//! For desk-scale work, [`generate_toy_dataset`] renders procedural embryo-like
//! images whose structure encodes the stage.

mod external;
mod ingest;
mod manifest;
mod split;
mod toy;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use external::{load_external_blastocyst, write_external_layout, EXTERNAL_CHECKSUMS, EXTERNAL_LABELS};
pub use ingest::{build_manifest, filter_fragmentation, select_representative_frames, Frame, StageOnset};
pub use manifest::{DatasetManifest, ImageRecord, Quality, Source, Split, MANIFEST_FILE};
pub use split::split_sequences;
pub use toy::{generate_toy_dataset, generate_toy_dataset_styled, Blob, BlobLedger, ToySample, ToyStyle};

/// Developmental stage of an embryo frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TwoCell,
    FourCell,
    EightCell,
    Morula,
    Blastocyst,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::TwoCell,
        Stage::FourCell,
        Stage::EightCell,
        Stage::Morula,
        Stage::Blastocyst,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> Option<Stage> {
        Stage::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::TwoCell => "two_cell",
            Stage::FourCell => "four_cell",
            Stage::EightCell => "eight_cell",
            Stage::Morula => "morula",
            Stage::Blastocyst => "blastocyst",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .iter()
            .copied()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

/// Per-(stage, source) image counts of the clinic and public time-lapse
/// datasets after curation: `(stage, clinic, public)`.
pub const REFERENCE_DISTRIBUTION: [(Stage, usize, usize); 5] = [
    (Stage::TwoCell, 1100, 0),
    (Stage::FourCell, 1100, 0),
    (Stage::EightCell, 850, 250),
    (Stage::Morula, 660, 440),
    (Stage::Blastocyst, 600, 500),
];
