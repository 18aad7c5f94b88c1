//! Synthetic multimodal image pairs with exactly known ground-truth alignment,
//! lattice-constrained pose perturbation sampling, and dataset persistence.
//!
//! A pair is a procedurally drawn scene (the moving image) plus an intensity
//! remap of the same scene (the fixed image): structure is pixel-identical
//! between the two, so ground truth is exact by construction.

use crate::geometry::{warp_image, LatticePose, SimilarityTransform};
use crate::raster::{Image, RasterError, MIN_IMAGE_SIZE};
use crate::{seeded_rng, Rng};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Manifest format understood by this build.
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Lattice units per parameter: pixels, pixels, degrees, scale steps.
const TRANSLATION_UNIT: f64 = 1.0;
const ANGLE_UNIT: f64 = 1.0;
const SCALE_UNIT: f64 = 0.05;

/// Additive noise sigma in `modality_remap`.
const REMAP_NOISE_SIGMA: f64 = 0.01;
/// Half-width of the intensity band reversed by `modality_remap`'s fold.
const REMAP_FOLD_HALF_WIDTH: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid {field} range: {reason}")]
    InvalidRange { field: &'static str, reason: String },
    #[error("{field} range value {value} is off the action lattice")]
    OffLattice { field: &'static str, value: f64 },
    #[error("cannot access manifest {path:?}: {source}")]
    ManifestIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path:?} is corrupt: {reason}")]
    ManifestParse { path: PathBuf, reason: String },
    #[error("unsupported dataset format version {got} (this build reads {expected})")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("duplicate pair id {id:?} in manifest")]
    DuplicateId { id: String },
    #[error("pair {id:?}: image is {got_w}x{got_h} but manifest says {want_w}x{want_h}")]
    DimensionMismatch { id: String, got_w: usize, got_h: usize, want_w: usize, want_h: usize },
    #[error("pair {id:?}: fixed and moving image sizes differ")]
    PairSizeMismatch { id: String },
    #[error(transparent)]
    Image(#[from] RasterError),
}

/// A fixed image and the moving image already in ground-truth alignment with
/// it (identity is the true pose).
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub fixed: Image,
    pub moving_aligned: Image,
}

impl ImagePair {
    pub fn new(id: String, fixed: Image, moving_aligned: Image) -> Result<ImagePair, SynthError> {
        if fixed.width() != moving_aligned.width() || fixed.height() != moving_aligned.height() {
            return Err(SynthError::PairSizeMismatch { id });
        }
        Ok(ImagePair { id, fixed, moving_aligned })
    }

    pub fn width(&self) -> usize {
        self.fixed.width()
    }

    pub fn height(&self) -> usize {
        self.fixed.height()
    }
}

/// Inclusive `[min, max]` with a positive step, in natural units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRange {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl ParamRange {
    pub fn new(min: f64, max: f64, step: f64) -> ParamRange {
        ParamRange { min, max, step }
    }

    /// Fixed single value (degenerate range).
    pub fn fixed(value: f64) -> ParamRange {
        ParamRange { min: value, max: value, step: 1.0 }
    }
}

/// `ParamRange` converted to integer lattice units (validated).
#[derive(Debug, Clone, Copy)]
struct GridRange {
    min: i64,
    max: i64,
    step: i64,
}

impl GridRange {
    fn from_param(r: &ParamRange, unit: f64, offset: f64, field: &'static str) -> Result<GridRange, SynthError> {
        if !(r.step > 0.0) {
            return Err(SynthError::InvalidRange {
                field,
                reason: format!("step must be positive, got {}", r.step),
            });
        }
        if r.min > r.max {
            return Err(SynthError::InvalidRange {
                field,
                reason: format!("min {} exceeds max {}", r.min, r.max),
            });
        }
        let to_lattice = |v: f64| -> Result<i64, SynthError> {
            let steps = (v - offset) / unit;
            let rounded = steps.round();
            if (steps - rounded).abs() > 1e-9 {
                return Err(SynthError::OffLattice { field, value: v });
            }
            Ok(rounded as i64)
        };
        let g = GridRange {
            min: to_lattice(r.min)?,
            max: to_lattice(r.max)?,
            step: to_lattice(offset + r.step)?,
        };
        if g.step < 1 {
            return Err(SynthError::OffLattice { field, value: r.step });
        }
        Ok(g)
    }

    fn sample(&self, rng: &mut Rng) -> i64 {
        let count = (self.max - self.min) / self.step + 1;
        self.min + self.step * rng.gen_range(0..count)
    }
}

/// Sampling ranges for the four pose parameters. Values must sit on the action
/// lattice (translation unit 1 px, angle unit 1 degree, scale unit 0.05).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationRange {
    pub tx: ParamRange,
    pub ty: ParamRange,
    pub angle: ParamRange,
    pub scale: ParamRange,
}

impl PerturbationRange {
    /// Training-distribution ranges: +-25 px, +-30 deg, scale 0.75..=1.25.
    pub fn e1() -> PerturbationRange {
        PerturbationRange {
            tx: ParamRange::new(-25.0, 25.0, 1.0),
            ty: ParamRange::new(-25.0, 25.0, 1.0),
            angle: ParamRange::new(-30.0, 30.0, 1.0),
            scale: ParamRange::new(0.75, 1.25, 0.05),
        }
    }

    /// Larger-than-training ranges: +-30 px, +-45 deg, scale 0.75..=1.25.
    pub fn e2() -> PerturbationRange {
        PerturbationRange {
            tx: ParamRange::new(-30.0, 30.0, 1.0),
            ty: ParamRange::new(-30.0, 30.0, 1.0),
            angle: ParamRange::new(-45.0, 45.0, 1.0),
            scale: ParamRange::new(0.75, 1.25, 0.05),
        }
    }

    /// Scaled-down e1 counterpart for small benchmark images:
    /// +-10 px, +-10 deg, scale 0.9..=1.1.
    pub fn e1_desk() -> PerturbationRange {
        PerturbationRange {
            tx: ParamRange::new(-10.0, 10.0, 1.0),
            ty: ParamRange::new(-10.0, 10.0, 1.0),
            angle: ParamRange::new(-10.0, 10.0, 1.0),
            scale: ParamRange::new(0.9, 1.1, 0.05),
        }
    }

    /// Scaled-down e2 counterpart, wider than the training range:
    /// +-14 px, +-15 deg, scale 0.9..=1.1.
    pub fn e2_desk() -> PerturbationRange {
        PerturbationRange {
            tx: ParamRange::new(-14.0, 14.0, 1.0),
            ty: ParamRange::new(-14.0, 14.0, 1.0),
            angle: ParamRange::new(-15.0, 15.0, 1.0),
            scale: ParamRange::new(0.9, 1.1, 0.05),
        }
    }

    /// Degenerate range that always samples the identity pose.
    pub fn identity() -> PerturbationRange {
        PerturbationRange {
            tx: ParamRange::fixed(0.0),
            ty: ParamRange::fixed(0.0),
            angle: ParamRange::fixed(0.0),
            scale: ParamRange::fixed(1.0),
        }
    }

    fn grids(&self) -> Result<[GridRange; 4], SynthError> {
        Ok([
            GridRange::from_param(&self.tx, TRANSLATION_UNIT, 0.0, "tx")?,
            GridRange::from_param(&self.ty, TRANSLATION_UNIT, 0.0, "ty")?,
            GridRange::from_param(&self.angle, ANGLE_UNIT, 0.0, "angle")?,
            GridRange::from_param(&self.scale, SCALE_UNIT, 1.0, "scale")?,
        ])
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.grids().map(|_| ())
    }
}

/// Uniform draw from each parameter's discretized grid; the result is exactly
/// reachable from identity by a finite action sequence.
pub fn sample_perturbation_pose(
    range: &PerturbationRange,
    rng: &mut Rng,
) -> Result<LatticePose, SynthError> {
    let [tx, ty, angle, scale] = range.grids()?;
    Ok(LatticePose::from_steps(
        tx.sample(rng),
        ty.sample(rng),
        angle.sample(rng),
        scale.sample(rng),
    ))
}

pub fn sample_perturbation(
    range: &PerturbationRange,
    rng: &mut Rng,
) -> Result<SimilarityTransform, SynthError> {
    Ok(sample_perturbation_pose(range, rng)?.to_transform())
}

fn value_noise(rng: &mut Rng, size: usize, cell: usize) -> Vec<f64> {
    let nodes = size / cell + 2;
    let grid: Vec<f64> = (0..nodes * nodes).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let gy = y as f64 / cell as f64;
        let y0 = gy.floor() as usize;
        let fy = gy - y0 as f64;
        for x in 0..size {
            let gx = x as f64 / cell as f64;
            let x0 = gx.floor() as usize;
            let fx = gx - x0 as f64;
            let v00 = grid[y0 * nodes + x0];
            let v10 = grid[y0 * nodes + x0 + 1];
            let v01 = grid[(y0 + 1) * nodes + x0];
            let v11 = grid[(y0 + 1) * nodes + x0 + 1];
            let top = v00 + (v10 - v00) * fx;
            let bot = v01 + (v11 - v01) * fx;
            out[y * size + x] = top + (bot - top) * fy;
        }
    }
    out
}

fn draw_scene(rng: &mut Rng, size: usize) -> Image {
    let s = size as f64;
    let mut data = vec![0.0f64; size * size];

    // Smooth background gradient.
    let (gx, gy) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / s - 0.5;
            let v = y as f64 / s - 0.5;
            data[y * size + x] = 0.35 + 0.2 * (gx * u + gy * v);
        }
    }

    // Overlapping graded shapes: ellipses and rotated rectangles.
    let count = rng.gen_range(5..=8);
    for _ in 0..count {
        let cx = rng.gen_range(0.15 * s..0.85 * s);
        let cy = rng.gen_range(0.15 * s..0.85 * s);
        let rx = rng.gen_range(0.08 * s..0.25 * s);
        let ry = rng.gen_range(0.08 * s..0.25 * s);
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let peak = rng.gen_range(0.3..0.95);
        let hardness = rng.gen_range(3.0..8.0);
        let rectangular = rng.gen_bool(0.7);
        let (sin, cos) = phi.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let u = (cos * dx + sin * dy) / rx;
                let v = (-sin * dx + cos * dy) / ry;
                let d = if rectangular {
                    u.abs().max(v.abs())
                } else {
                    (u * u + v * v).sqrt()
                };
                if d < 1.0 {
                    let w = 1.0 - d.powf(hardness);
                    let px = &mut data[y * size + x];
                    *px = *px * (1.0 - w) + peak * w;
                }
            }
        }
    }

    // Low-amplitude smooth texture so flat regions are not degenerate.
    let cell = (size / 12).max(4);
    let noise = value_noise(rng, size, cell);
    for (px, n) in data.iter_mut().zip(noise) {
        *px = (*px + 0.02 * n).clamp(0.0, 1.0);
    }

    Image::from_vec(size, size, data).unwrap().quantize_to_u8_lattice()
}

/// Deterministic procedural scene: at least 5 overlapping graded shapes over a
/// gradient background plus low-amplitude texture, quantized to the 8-bit
/// intensity lattice, with std >= 0.05 guaranteed.
pub fn generate_base_image(seed: u64, size: usize) -> Image {
    assert!(size >= MIN_IMAGE_SIZE, "image size {size} below minimum {MIN_IMAGE_SIZE}");
    let mut rng = seeded_rng(seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(0xBA5E));
    let mut last = None;
    for _ in 0..16 {
        let img = draw_scene(&mut rng, size);
        if img.std() >= 0.05 {
            return img;
        }
        last = Some(img);
    }
    // Unreachable in practice; concentric rings guarantee contrast.
    let scene = last.unwrap();
    let s = size as f64;
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let r = ((x as f64 - s / 2.0).powi(2) + (y as f64 - s / 2.0).powi(2)).sqrt();
            let rings = 0.5 + 0.45 * (std::f64::consts::TAU * r / (s / 4.0)).cos();
            data.push((0.75 * rings + 0.25 * scene.get(x, y)).clamp(0.0, 1.0));
        }
    }
    Image::from_vec(size, size, data).unwrap().quantize_to_u8_lattice()
}

/// Reverses intensity order inside `[c-w, c+w]` (a triangle wave: up at slope
/// 2, down at -2, up at 2) and is the identity elsewhere. Continuous and
/// genuinely non-monotone, but touches only a thin slice of the range, so most
/// corner responses survive.
fn localized_fold(v: f64, c: f64, w: f64) -> f64 {
    if v < c - w || v > c + w {
        v
    } else if v < c {
        (c - w) + 2.0 * (v - (c - w))
    } else if v < c + w / 2.0 {
        (c + w) - 2.0 * (v - c)
    } else {
        c + 2.0 * (v - (c + w / 2.0))
    }
}

/// Simulates a modality gap with a monotone-breaking intensity remap:
/// inversion, a localized order-reversing fold, global and per-band gamma,
/// plus additive Gaussian noise, quantized. Purely per-pixel, so structure
/// never moves.
pub fn modality_remap(img: &Image, seed: u64) -> Image {
    let mut rng = seeded_rng(seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(0x5EA4));
    // Fold window stays clear of mid-gray so a constant 0.5 image is left for
    // the global gamma to displace.
    let c = if rng.gen_bool(0.5) { rng.gen_range(0.2..0.38) } else { rng.gen_range(0.62..0.8) };
    // Global gamma bounded away from 1 in both directions.
    let global_gamma = if rng.gen_bool(0.5) { rng.gen_range(0.6..0.72) } else { rng.gen_range(1.4..1.67) };
    let band_gammas: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.85..1.18));
    let noise = Normal::new(0.0, REMAP_NOISE_SIGMA).unwrap();

    let data = img
        .as_slice()
        .iter()
        .map(|&v| {
            let inverted = 1.0 - v;
            let folded = localized_fold(inverted, c, REMAP_FOLD_HALF_WIDTH);
            let curved = folded.clamp(0.0, 1.0).powf(global_gamma);
            let band = ((curved * 4.0) as usize).min(3);
            let lo = band as f64 * 0.25;
            let local = ((curved - lo) / 0.25).clamp(0.0, 1.0);
            let shaped = lo + 0.25 * local.powf(band_gammas[band]);
            (shaped + noise.sample(&mut rng)).clamp(0.0, 1.0)
        })
        .collect();
    Image::from_vec(img.width(), img.height(), data)
        .unwrap()
        .quantize_to_u8_lattice()
}

/// One synthetic multimodal pair: the drawn scene is the moving image and its
/// remap is the fixed image.
pub fn generate_pair(id: String, seed: u64, size: usize) -> ImagePair {
    let moving_aligned = generate_base_image(seed, size);
    let fixed = modality_remap(&moving_aligned, seed);
    ImagePair { id, fixed, moving_aligned }
}

/// `count` pairs with per-pair decorrelated seeds derived from `seed`.
pub fn generate_dataset(seed: u64, size: usize, count: usize) -> Vec<ImagePair> {
    (0..count)
        .map(|i| {
            let pair_seed = seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15));
            generate_pair(format!("pair-{i:04}"), pair_seed, size)
        })
        .collect()
}

/// Episode inputs: the fixed image unchanged and the moving image warped by
/// the perturbation. The ground-truth recovery transform is `invert(perturb)`.
pub fn make_episode_pair(pair: &ImagePair, perturb: &SimilarityTransform) -> (Image, Image) {
    (pair.fixed.clone(), warp_image(&pair.moving_aligned, perturb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub fixed: String,
    pub moving: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    #[serde(default, rename = "pair")]
    pub pairs: Vec<ManifestEntry>,
}

/// Writes every pair as two PGM files next to `manifest_path` plus the
/// manifest itself. Image intensities sit on the 8-bit lattice, so a
/// save/load round trip is bit-exact.
pub fn save_dataset(
    pairs: &[ImagePair],
    seed: u64,
    manifest_path: &Path,
) -> Result<DatasetManifest, SynthError> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let fixed_name = format!("{}_fixed.pgm", pair.id);
        let moving_name = format!("{}_moving.pgm", pair.id);
        pair.fixed.save_pgm(&dir.join(&fixed_name))?;
        pair.moving_aligned.save_pgm(&dir.join(&moving_name))?;
        entries.push(ManifestEntry {
            id: pair.id.clone(),
            fixed: fixed_name,
            moving: moving_name,
            width: pair.width(),
            height: pair.height(),
        });
    }
    let manifest = DatasetManifest { format_version: DATASET_FORMAT_VERSION, seed, pairs: entries };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    let mut file = std::fs::File::create(manifest_path)
        .map_err(|source| SynthError::ManifestIo { path: manifest_path.to_owned(), source })?;
    file.write_all(text.as_bytes())
        .map_err(|source| SynthError::ManifestIo { path: manifest_path.to_owned(), source })?;
    Ok(manifest)
}

/// Loads a manifest and every image it references, verifying version, id
/// uniqueness, and dimensions.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<ImagePair>), SynthError> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|source| SynthError::ManifestIo { path: manifest_path.to_owned(), source })?;
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| SynthError::ManifestParse {
        path: manifest_path.to_owned(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(SynthError::VersionMismatch {
            got: manifest.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }

    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = std::collections::HashSet::new();
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for entry in &manifest.pairs {
        if !seen.insert(entry.id.clone()) {
            return Err(SynthError::DuplicateId { id: entry.id.clone() });
        }
        let fixed = Image::load_pgm(&dir.join(&entry.fixed))?;
        let moving = Image::load_pgm(&dir.join(&entry.moving))?;
        for img in [&fixed, &moving] {
            if img.width() != entry.width || img.height() != entry.height {
                return Err(SynthError::DimensionMismatch {
                    id: entry.id.clone(),
                    got_w: img.width(),
                    got_h: img.height(),
                    want_w: entry.width,
                    want_h: entry.height,
                });
            }
        }
        pairs.push(ImagePair::new(entry.id.clone(), fixed, moving)?);
    }
    Ok((manifest, pairs))
}
