//! External blastocyst test set.
//!
//! Layout: a flat directory of PNG images, a `labels.csv` file with header
//! `image,quality` (quality one of `good`, `fair`, `poor`), and an optional
//! `SHA256SUMS` file in `sha256sum` format covering every image.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DatasetManifest, ImageRecord, Quality, Source, Stage};
use crate::error::{Error, Result};
use crate::raster::GrayImage;

pub const EXTERNAL_LABELS: &str = "labels.csv";
pub const EXTERNAL_CHECKSUMS: &str = "SHA256SUMS";

pub fn load_external_blastocyst(dir: &Path) -> Result<DatasetManifest> {
    let labels_path = dir.join(EXTERNAL_LABELS);
    if !labels_path.is_file() {
        return Err(Error::Invalid(format!(
            "external set at {} has no {EXTERNAL_LABELS}",
            dir.display()
        )));
    }
    let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let checksums = read_checksums(dir)?;

    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("image")) {
            continue;
        }
        let (name, quality) = line.split_once(',').ok_or_else(|| Error::Manifest {
            line: i + 1,
            message: format!("expected `image,quality`, got `{line}`"),
        })?;
        let name = name.trim();
        let quality: Quality = quality.parse()?;
        let path = dir.join(name);
        if !path.is_file() {
            return Err(Error::Invalid(format!("labeled image {} is missing", path.display())));
        }
        if let Some(sums) = &checksums {
            let expected = sums.get(name).ok_or_else(|| {
                Error::Invalid(format!("{name} has no entry in {EXTERNAL_CHECKSUMS}"))
            })?;
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let actual = hex::encode(Sha256::digest(&bytes));
            if &actual != expected {
                return Err(Error::Invalid(format!("checksum mismatch for {name}")));
            }
        }
        let stem = Path::new(name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| name.to_string());
        let mut rec = ImageRecord::new(
            format!("external-{stem}"),
            format!("external-{stem}"),
            Stage::Blastocyst,
            Source::External,
            name,
        );
        rec.quality = Some(quality);
        records.push(rec);
    }
    DatasetManifest::new(records, format!("external blastocyst set from {}", dir.display()))
}

fn read_checksums(dir: &Path) -> Result<Option<HashMap<String, String>>> {
    let path = dir.join(EXTERNAL_CHECKSUMS);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut sums = HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (hash, name) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::Invalid(format!("bad checksum line `{line}`")))?;
        sums.insert(name.trim().trim_start_matches('*').to_string(), hash.to_ascii_lowercase());
    }
    Ok(Some(sums))
}

/// Writes images in the external layout, including the checksum file.
pub fn write_external_layout(dir: &Path, images: &[(String, GrayImage, Quality)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut labels = String::from("image,quality\n");
    let mut sums = String::new();
    for (name, img, q) in images {
        let bytes = img.to_png_bytes();
        let path = dir.join(name);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        let q = match q {
            Quality::Good => "good",
            Quality::Fair => "fair",
            Quality::Poor => "poor",
        };
        labels.push_str(&format!("{name},{q}\n"));
        sums.push_str(&format!("{}  {name}\n", hex::encode(Sha256::digest(&bytes))));
    }
    let lp = dir.join(EXTERNAL_LABELS);
    fs::write(&lp, labels).map_err(|e| Error::io(&lp, e))?;
    let sp = dir.join(EXTERNAL_CHECKSUMS);
    fs::write(&sp, sums).map_err(|e| Error::io(&sp, e))
}
