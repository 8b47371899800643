//! Random geometric augmentation of the training split.
//!
//! Transforms compose flip, zoom, rotation and translation about the image
//! center and resample bilinearly with nearest-edge fill.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_image, DatasetManifest, ImageTensor, Record, Split};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Degrees; angles are drawn from [-range, range].
    pub rotation_range: f64,
    /// Zoom factors are drawn from [1 - range, 1 + range].
    pub zoom_range: f64,
    /// Fraction of the image width.
    pub width_shift_range: f64,
    /// Fraction of the image height.
    pub height_shift_range: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    /// Augmented copies emitted per training image.
    pub multiplier: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation_range: 10.0,
            zoom_range: 0.2,
            width_shift_range: 0.2,
            height_shift_range: 0.2,
            horizontal_flip: true,
            vertical_flip: true,
            multiplier: 5,
        }
    }
}

impl AugmentationConfig {
    /// A config that samples only identity transforms.
    pub fn disabled() -> Self {
        Self {
            rotation_range: 0.0,
            zoom_range: 0.0,
            width_shift_range: 0.0,
            height_shift_range: 0.0,
            horizontal_flip: false,
            vertical_flip: false,
            multiplier: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation_range", self.rotation_range),
            ("zoom_range", self.zoom_range),
            ("width_shift_range", self.width_shift_range),
            ("height_shift_range", self.height_shift_range),
        ];
        for (name, v) in ranges {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        for (name, v) in &ranges[1..] {
            if *v >= 1.0 {
                return Err(Error::Config(format!("{name} must be < 1, got {v}")));
            }
        }
        Ok(())
    }
}

/// One concrete augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    /// Degrees, counter-clockwise as displayed.
    pub angle: f64,
    pub zoom: f64,
    /// Pixels; positive moves content right.
    pub dx: f64,
    /// Pixels; positive moves content down.
    pub dy: f64,
    pub h_flip: bool,
    pub v_flip: bool,
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        angle: 0.0,
        zoom: 1.0,
        dx: 0.0,
        dy: 0.0,
        h_flip: false,
        v_flip: false,
    };

    fn is_pure_flip(&self) -> bool {
        self.angle == 0.0 && self.zoom == 1.0 && self.dx == 0.0 && self.dy == 0.0
    }

    /// Whether every field lies inside the ranges allowed by `config` for an
    /// image of the given size.
    pub fn within(&self, config: &AugmentationConfig, height: usize, width: usize) -> bool {
        self.angle.abs() <= config.rotation_range
            && (self.zoom - 1.0).abs() <= config.zoom_range
            && self.dx.abs() <= config.width_shift_range * width as f64
            && self.dy.abs() <= config.height_shift_range * height as f64
            && (config.horizontal_flip || !self.h_flip)
            && (config.vertical_flip || !self.v_flip)
    }
}

/// Draws angle, zoom and shifts uniformly from their ranges; each enabled
/// flip fires with probability 0.5.
pub fn sample_transform<R: Rng + ?Sized>(
    config: &AugmentationConfig,
    height: usize,
    width: usize,
    rng: &mut R,
) -> AffineTransform {
    let symmetric = |rng: &mut R, r: f64| rng.random_range(-r..=r);
    let angle = symmetric(rng, config.rotation_range);
    let zoom = 1.0 + symmetric(rng, config.zoom_range);
    let dx = symmetric(rng, config.width_shift_range * width as f64);
    let dy = symmetric(rng, config.height_shift_range * height as f64);
    let h_flip = config.horizontal_flip && rng.random_bool(0.5);
    let v_flip = config.vertical_flip && rng.random_bool(0.5);
    AffineTransform {
        angle,
        zoom,
        dx,
        dy,
        h_flip,
        v_flip,
    }
}

/// Applies `t` as a single warp. Output has the input's shape.
pub fn apply_transform(image: &ImageTensor, t: &AffineTransform) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    if t.is_pure_flip() {
        return ImageTensor::from_fn(h, w, |y, x, c| {
            let sx = if t.h_flip { w - 1 - x } else { x };
            let sy = if t.v_flip { h - 1 - y } else { y };
            image.get(sy, sx, c)
        });
    }

    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (sin, cos) = t.angle.to_radians().sin_cos();
    let fx = if t.h_flip { -1.0 } else { 1.0 };
    let fy = if t.v_flip { -1.0 } else { 1.0 };

    ImageTensor::from_fn(h, w, |y, x, c| {
        // undo translate, then rotate, zoom and flip, all about the center
        let ux = x as f64 - cx - t.dx;
        let uy = y as f64 - cy - t.dy;
        // y grows downward, so a displayed counter-clockwise turn is R(-angle)
        // in array coordinates; its inverse is R(angle)
        let rx = cos * ux - sin * uy;
        let ry = sin * ux + cos * uy;
        let sx = fx * rx / t.zoom + cx;
        let sy = fy * ry / t.zoom + cy;
        bilinear_clamped(image, sy, sx, c)
    })
}

fn bilinear_clamped(image: &ImageTensor, y: f64, x: f64, c: usize) -> f32 {
    let x = x.clamp(0.0, (image.width() - 1) as f64);
    let y = y.clamp(0.0, (image.height() - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(image.width() - 1);
    let y1 = (y0 + 1).min(image.height() - 1);
    let ax = (x - x0 as f64) as f32;
    let ay = (y - y0 as f64) as f32;
    let top = image.get(y0, x0, c) * (1.0 - ax) + image.get(y0, x1, c) * ax;
    let bottom = image.get(y1, x0, c) * (1.0 - ax) + image.get(y1, x1, c) * ax;
    top * (1.0 - ay) + bottom * ay
}

/// Suffix for the `k`-th augmented copy of a file stem.
pub fn augmented_name(stem: &str, k: usize) -> String {
    format!("{stem}_aug{k}.png")
}

/// Writes `config.multiplier` transformed copies of every training image in
/// `manifest` (paths relative to `base`) next to the original, at
/// `target_h` x `target_w`. Returns the manifest extended with the new
/// records. Validation and test records pass through untouched.
///
/// Copy `k` of the `i`-th training record draws from its own substream of
/// `seed`, so output does not depend on scheduling.
pub fn augment_split(
    manifest: &DatasetManifest,
    base: &Path,
    config: &AugmentationConfig,
    seed: u64,
    target_h: usize,
    target_w: usize,
) -> Result<DatasetManifest> {
    config.validate()?;
    let train: Vec<&Record> = manifest.in_split(Split::Train).collect();
    remove_stale_copies(manifest, base)?;

    let generated: Vec<Vec<Record>> = train
        .par_iter()
        .enumerate()
        .map(|(i, record)| -> Result<Vec<Record>> {
            if config.multiplier == 0 {
                return Ok(Vec::new());
            }
            let source = load_image(&base.join(&record.path), target_h, target_w)?;
            let mut rng = seed::rng(seed::derive_indexed(seed, "augment", i as u64));
            let stem = record
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let dir = record.path.parent().map(Path::to_path_buf).unwrap_or_default();
            (1..=config.multiplier)
                .map(|k| {
                    let t = sample_transform(config, target_h, target_w, &mut rng);
                    let out = apply_transform(&source, &t);
                    let relative = dir.join(augmented_name(&stem, k));
                    out.save_png(&base.join(&relative))?;
                    Ok(Record {
                        path: relative,
                        label: record.label,
                        split: Split::Train,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut records = manifest.records().to_vec();
    records.extend(generated.into_iter().flatten());
    DatasetManifest::new(manifest.classes().to_vec(), records)
}

/// Deletes `*_augK.png` files under the training class directories that are
/// not part of `manifest`, so a smaller multiplier never leaves extra copies.
fn remove_stale_copies(manifest: &DatasetManifest, base: &Path) -> Result<()> {
    let known: HashSet<PathBuf> = manifest.records().iter().map(|r| base.join(&r.path)).collect();
    for class in manifest.classes() {
        let dir = base.join(Split::Train.as_str()).join(class);
        let Ok(entries) = fs::read_dir(&dir) else {
            continue;
        };
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if is_augmented_name(&path) && !known.contains(&path) {
                fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    Ok(())
}

fn is_augmented_name(path: &Path) -> bool {
    let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
        return false;
    };
    match stem.rsplit_once("_aug") {
        Some((_, k)) => !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit()),
        None => false,
    }
}
