use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ImageRecord, Source, Stage};
use crate::error::{Error, Result};
use crate::raster::GrayImage;

/// A filled disc in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Blob {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        dx * dx + dy * dy <= self.r * self.r
    }
}

/// What the generator drew, before noise.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobLedger {
    pub stage: Stage,
    /// Outer and inner zona radius around the image center.
    pub zona: (f64, f64, f64, f64),
    /// Separate cells for cleavage stages; the compacted mass for a morula;
    /// trophectoderm ring (outer disc) and inner cell mass for a blastocyst.
    pub blobs: Vec<Blob>,
    pub cavity: Option<Blob>,
}

impl BlobLedger {
    /// Number of disjoint cell structures the stage encodes.
    pub fn structure_count(&self) -> usize {
        match self.stage {
            Stage::TwoCell | Stage::FourCell | Stage::EightCell => self.blobs.len(),
            Stage::Morula | Stage::Blastocyst => 1,
        }
    }
}

/// Global appearance knobs, used to emulate acquisition shifts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyStyle {
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
}

impl Default for ToyStyle {
    fn default() -> Self {
        ToyStyle {
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.025,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToySample {
    pub record: ImageRecord,
    pub image: GrayImage,
    pub ledger: BlobLedger,
    /// Cell mask before noise, row-major.
    pub mask: Vec<bool>,
}

const MIN_GAP_PX: f64 = 2.0;

/// Renders `count` procedural embryo images of `stage`.
///
/// Sample `i` belongs to sequence `toy<seed>-<i>` whatever the stage, so
/// calling this for every stage with one seed yields sequences that span all
/// five stages. Output is a pure function of the arguments.
pub fn generate_toy_dataset(
    stage: Stage,
    count: usize,
    seed: u64,
    resolution: usize,
) -> Result<Vec<ToySample>> {
    generate_toy_dataset_styled(stage, count, seed, resolution, ToyStyle::default(), Source::Toy)
}

pub fn generate_toy_dataset_styled(
    stage: Stage,
    count: usize,
    seed: u64,
    resolution: usize,
    style: ToyStyle,
    source: Source,
) -> Result<Vec<ToySample>> {
    if resolution < 64 {
        return Err(Error::Invalid(format!("toy resolution {resolution} < 64")));
    }
    if count == 0 {
        return Err(Error::Invalid("toy count must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let seq_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
        let mut seq_rng = ChaCha8Rng::seed_from_u64(seq_seed);
        let fragmentation: f64 = seq_rng.random_range(0.0..18.0);
        let hours_jitter: f64 = seq_rng.random_range(-2.0..2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seq_seed ^ ((stage.ordinal() as u64 + 1) << 56));

        let (image, ledger, mask) = render(stage, resolution, style, &mut rng);
        let sequence_id = format!("toy{seed}-{i:04}");
        let mut record = ImageRecord::new(
            format!("{sequence_id}-{stage}"),
            sequence_id.clone(),
            stage,
            source,
            format!("{stage}/{sequence_id}_{}.png", stage.ordinal()),
        );
        if !source.is_synthetic() {
            record.hours_post_fertilization = Some(typical_hours(stage) + hours_jitter);
        }
        record.fragmentation_pct = Some(fragmentation);
        out.push(ToySample {
            record,
            image,
            ledger,
            mask,
        });
    }
    Ok(out)
}

fn typical_hours(stage: Stage) -> f64 {
    match stage {
        Stage::TwoCell => 30.0,
        Stage::FourCell => 42.0,
        Stage::EightCell => 62.0,
        Stage::Morula => 92.0,
        Stage::Blastocyst => 112.0,
    }
}

/// Unit-circle layout `(ring radius, blob radius)` for cleavage stages.
fn cleavage_layout(n: usize) -> (f64, f64) {
    match n {
        2 => (0.48, 0.40),
        4 => (0.55, 0.30),
        _ => (0.64, 0.20),
    }
}

fn place_cells(n: usize, center: (f64, f64), interior: f64, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let (ring, radius) = cleavage_layout(n);
    let rotation = rng.random_range(0.0..2.0 * PI);
    let mut jitter = 0.05;
    let mut shrink = 1.0;
    loop {
        let blobs: Vec<Blob> = (0..n)
            .map(|k| {
                let a = rotation + 2.0 * PI * k as f64 / n as f64;
                let rho = ring + rng.random_range(-jitter..=jitter) * 0.5;
                let r = shrink * radius * (1.0 + rng.random_range(-jitter..=jitter));
                Blob {
                    cx: center.0 + interior * (rho * a.cos() + rng.random_range(-jitter..=jitter) * 0.3),
                    cy: center.1 + interior * (rho * a.sin() + rng.random_range(-jitter..=jitter) * 0.3),
                    r: interior * r,
                }
            })
            .collect();
        let separated = blobs.iter().enumerate().all(|(i, a)| {
            blobs[i + 1..].iter().all(|b| {
                let d = ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt();
                d - a.r - b.r >= MIN_GAP_PX
            })
        });
        let inside = blobs.iter().all(|b| {
            ((b.cx - center.0).powi(2) + (b.cy - center.1).powi(2)).sqrt() + b.r <= interior
        });
        if separated && inside {
            return blobs;
        }
        if jitter == 0.0 {
            shrink *= 0.95;
        }
        jitter *= 0.5;
        if jitter < 1e-4 {
            jitter = 0.0;
        }
    }
}

fn render(stage: Stage, res: usize, style: ToyStyle, rng: &mut ChaCha8Rng) -> (GrayImage, BlobLedger, Vec<bool>) {
    let r = res as f64;
    let center = (
        r / 2.0 + rng.random_range(-0.03..0.03) * r,
        r / 2.0 + rng.random_range(-0.03..0.03) * r,
    );
    let zona_outer = r * rng.random_range(0.40..0.44);
    let zona_inner = zona_outer - r * 0.05;
    let interior = zona_inner - 2.0;

    let mut blobs = Vec::new();
    let mut cavity = None;
    match stage {
        Stage::TwoCell => blobs = place_cells(2, center, interior, rng),
        Stage::FourCell => blobs = place_cells(4, center, interior, rng),
        Stage::EightCell => blobs = place_cells(8, center, interior, rng),
        Stage::Morula => blobs.push(Blob {
            cx: center.0 + rng.random_range(-0.05..0.05) * interior,
            cy: center.1 + rng.random_range(-0.05..0.05) * interior,
            r: interior * rng.random_range(0.62..0.72),
        }),
        Stage::Blastocyst => {
            let outer = Blob {
                cx: center.0,
                cy: center.1,
                r: interior * rng.random_range(0.90..0.96),
            };
            let cav = Blob {
                cx: center.0,
                cy: center.1,
                r: outer.r - interior * 0.14,
            };
            let a = rng.random_range(0.0..2.0 * PI);
            let icm_r = interior * rng.random_range(0.26..0.32);
            let icm = Blob {
                cx: center.0 + (cav.r - icm_r * 0.6) * a.cos(),
                cy: center.1 + (cav.r - icm_r * 0.6) * a.sin(),
                r: icm_r,
            };
            blobs.push(outer);
            blobs.push(icm);
            cavity = Some(cav);
        }
    }

    let granules: Vec<Blob> = if stage == Stage::Morula {
        (0..40)
            .map(|_| {
                let a = rng.random_range(0.0..2.0 * PI);
                let d = blobs[0].r * rng.random_range(0.0f64..0.9).sqrt();
                Blob {
                    cx: blobs[0].cx + d * a.cos(),
                    cy: blobs[0].cy + d * a.sin(),
                    r: r * 0.012 + rng.random_range(0.0..1.0),
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut mask = vec![false; res * res];
    let mut img = GrayImage::new(res, res);
    let noise = Normal::new(0.0, style.noise_sigma.max(1e-12)).expect("sigma is positive");
    for y in 0..res {
        for x in 0..res {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let dc = ((px - center.0).powi(2) + (py - center.1).powi(2)).sqrt();
            let mut v = 0.30;
            if dc <= zona_outer && dc > zona_inner {
                v = 0.75;
            } else if dc <= zona_inner {
                v = 0.38;
            }
            let in_cell = match stage {
                Stage::Blastocyst => {
                    let cav = cavity.expect("blastocyst has a cavity");
                    let in_ring = blobs[0].contains(px, py) && !cav.contains(px, py);
                    let in_icm = blobs[1].contains(px, py);
                    if in_icm {
                        v = 0.66;
                    } else if in_ring {
                        v = 0.60;
                    } else if cav.contains(px, py) {
                        v = 0.22;
                    }
                    in_ring || in_icm
                }
                _ => {
                    let hit = blobs.iter().find(|b| b.contains(px, py));
                    if let Some(b) = hit {
                        let d = ((px - b.cx).powi(2) + (py - b.cy).powi(2)).sqrt() / b.r;
                        v = if d > 0.85 { 0.47 } else { 0.66 - 0.08 * d };
                        if granules.iter().any(|g| g.contains(px, py)) {
                            v -= 0.12;
                        }
                    }
                    hit.is_some()
                }
            };
            mask[y * res + x] = in_cell;
            let styled = (v - 0.5) * style.contrast + 0.5 + style.brightness;
            img.set(x, y, styled + noise.sample(rng));
        }
    }
    let ledger = BlobLedger {
        stage,
        zona: (center.0, center.1, zona_outer, zona_inner),
        blobs,
        cavity,
    };
    (img.clamp01(), ledger, mask)
}
