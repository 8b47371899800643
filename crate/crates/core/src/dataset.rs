//! Class-per-directory ingestion, stratified splitting and image loading.
//!
//! Class indices follow the lexicographic order of the class directory
//! names, so a corpus with `Diabetic/` and `Normal/` maps Diabetic to 0 and
//! Normal to 1 on every filesystem.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png", "tif", "tiff"];

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassLabel {
    pub index: usize,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub path: PathBuf,
    /// Index into [`DatasetManifest::classes`].
    pub label: usize,
    pub split: Split,
}

impl Record {
    /// Forward-slash form of the path, used as the row id everywhere downstream.
    pub fn id(&self) -> String {
        path_to_id(&self.path)
    }
}

pub(crate) fn path_to_id(path: &Path) -> String {
    path.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Labeled image records plus their split assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    classes: Vec<String>,
    records: Vec<Record>,
}

impl DatasetManifest {
    /// Build a manifest from parts. Records are re-sorted by (label, path).
    pub fn new(classes: Vec<String>, mut records: Vec<Record>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Dataset("manifest has no classes".into()));
        }
        let mut sorted = classes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != classes {
            return Err(Error::Dataset(format!(
                "class names must be unique and in lexicographic order, got {classes:?}"
            )));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if r.label >= classes.len() {
                return Err(Error::Dataset(format!(
                    "record {} has label index {} but only {} classes exist",
                    r.path.display(),
                    r.label,
                    classes.len()
                )));
            }
            if !seen.insert(r.path.clone()) {
                return Err(Error::Dataset(format!(
                    "duplicate path {} in manifest",
                    r.path.display()
                )));
            }
        }
        records.sort_by(|a, b| (a.label, &a.path).cmp(&(b.label, &b.path)));
        Ok(Self { classes, records })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_labels(&self) -> Vec<ClassLabel> {
        self.classes
            .iter()
            .enumerate()
            .map(|(index, name)| ClassLabel {
                index,
                name: name.clone(),
            })
            .collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    /// Per-class counts restricted to one split.
    pub fn split_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in self.records.iter().filter(|r| r.split == split) {
            counts[r.label] += 1;
        }
        counts
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn is_fully_split(&self) -> bool {
        self.records.iter().all(|r| r.split != Split::Unassigned)
    }

    /// Writes `path,label,split` with LF line endings.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| Error::csv(path, e))?;
        writer
            .write_record(["path", "label", "split"])
            .map_err(|e| Error::csv(path, e))?;
        for r in &self.records {
            writer
                .write_record([r.id().as_str(), &self.classes[r.label], r.split.as_str()])
                .map_err(|e| Error::csv(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a manifest CSV. Classes are recovered as the sorted set of labels.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(Error::Dataset(format!(
                "{}: expected header `path,label,split`",
                path.display()
            )));
        }
        let mut rows = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| Error::csv(path, e))?;
            rows.push((row[0].to_string(), row[1].to_string(), row[2].parse::<Split>()?));
        }
        let mut classes: Vec<String> = rows.iter().map(|(_, l, _)| l.clone()).collect();
        classes.sort();
        classes.dedup();
        let records = rows
            .into_iter()
            .map(|(p, l, split)| Record {
                path: PathBuf::from(p),
                label: classes.binary_search(&l).expect("label collected above"),
                split,
            })
            .collect();
        Self::new(classes, records)
    }
}

/// Fractions for train/validation/test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let ratios = Self { train, val, test };
        ratios.validate()?;
        Ok(ratios)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!(
                    "split ratio `{name}` must lie in (0, 1), got {r}"
                )));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must sum to 1, got {sum}")));
        }
        Ok(())
    }

    /// (train, val, test) counts for a class of `n` items: floor for train
    /// and val, remainder to test.
    pub fn counts_for(&self, n: usize) -> (usize, usize, usize) {
        let floor = |r: f64| {
            let x = n as f64 * r;
            // absorb representation error such as 0.7 * 300 = 209.99999...
            (x + 1e-9 * x.max(1.0)).floor() as usize
        };
        let train = floor(self.train).min(n);
        let val = floor(self.val).min(n - train);
        (train, val, n - train - val)
    }
}

/// One record per image found under `root/<class>/`, sorted by (label, path).
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} does not exist or is not a directory",
            root.display()
        )));
    }
    let mut class_dirs = BTreeMap::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        if entry.path().is_dir() {
            class_dirs.insert(name, entry.path());
        }
    }
    if class_dirs.len() < 2 {
        return Err(Error::Dataset(format!(
            "{} must contain at least 2 class directories, found {}",
            root.display(),
            class_dirs.len()
        )));
    }

    let classes: Vec<String> = class_dirs.keys().cloned().collect();
    let mut records = Vec::new();
    for (label, (name, dir)) in class_dirs.iter().enumerate() {
        let mut found = 0usize;
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if !path.is_file() || !has_image_extension(&path) {
                continue;
            }
            if let Err(e) = fs::File::open(&path) {
                log::warn!("skipping unreadable file {}: {e}", path.display());
                continue;
            }
            records.push(Record {
                path,
                label,
                split: Split::Unassigned,
            });
            found += 1;
        }
        if found == 0 {
            return Err(Error::Dataset(format!(
                "class directory `{name}` contains no readable images"
            )));
        }
    }
    DatasetManifest::new(classes, records)
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Per-class seeded shuffle followed by the floor/remainder assignment.
///
/// Split sizes depend only on class sizes and ratios; membership depends on
/// the seed.
pub fn stratified_split(
    manifest: &DatasetManifest,
    ratios: &SplitRatios,
    seed: u64,
) -> Result<DatasetManifest> {
    ratios.validate()?;
    let mut records = manifest.records.clone();
    for (label, name) in manifest.classes.iter().enumerate() {
        let mut members: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].label == label)
            .collect();
        let n = members.len();
        if n < 3 {
            return Err(Error::Dataset(format!(
                "class `{name}` has {n} images; at least 3 are required to split"
            )));
        }
        let (train, val, _) = ratios.counts_for(n);
        if train == 0 {
            return Err(Error::Dataset(format!(
                "class `{name}` with {n} images yields an empty training split"
            )));
        }
        let mut rng = seed::rng(seed::derive(seed, &format!("split/{name}")));
        members.shuffle(&mut rng);
        for (rank, &i) in members.iter().enumerate() {
            records[i].split = if rank < train {
                Split::Train
            } else if rank < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    DatasetManifest::new(manifest.classes.clone(), records)
}

/// Copies every record into `out/<split>/<class>/<file>` and writes
/// `out/manifest.csv`. The returned manifest holds paths relative to `out`.
pub fn materialize_split(manifest: &DatasetManifest, out: &Path) -> Result<DatasetManifest> {
    if !manifest.is_fully_split() {
        return Err(Error::Dataset(
            "cannot materialize a manifest with unassigned records".into(),
        ));
    }
    let mut records = Vec::with_capacity(manifest.len());
    for r in &manifest.records {
        let file_name = r.path.file_name().ok_or_else(|| {
            Error::Dataset(format!("record path {} has no file name", r.path.display()))
        })?;
        let relative = Path::new(r.split.as_str())
            .join(&manifest.classes[r.label])
            .join(file_name);
        let dest = out.join(&relative);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::copy(&r.path, &dest).map_err(|e| Error::io(&dest, e))?;
        records.push(Record {
            path: relative,
            label: r.label,
            split: r.split,
        });
    }
    let materialized = DatasetManifest::new(manifest.classes.clone(), records)?;
    materialized.write_csv(&out.join(MANIFEST_FILE))?;
    Ok(materialized)
}

/// RGB image in HWC layout with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Shape(format!(
                "{}x{}x3 image needs {} values, got {}",
                height,
                width,
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "image value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * Self::CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..Self::CHANNELS {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::from_fn(height, width, |_, _, _| value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * Self::CHANNELS + c]
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    fn from_rgb32f(img: &image::Rgb32FImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    /// 8-bit RGB copy, rounding to the nearest level.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Decodes `path`, converts to RGB, scales to [0, 1] and resizes bilinearly
/// to `target_h` x `target_w`. Correctly sized images skip resampling.
pub fn load_image(path: &Path, target_h: usize, target_w: usize) -> Result<ImageTensor> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidInput(format!(
            "target size {target_h}x{target_w} must be nonzero"
        )));
    }
    let decoded = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(resize_rgb(&decoded.to_rgb32f(), target_h, target_w))
}

pub(crate) fn resize_rgb(img: &image::Rgb32FImage, target_h: usize, target_w: usize) -> ImageTensor {
    let (w, h) = img.dimensions();
    if (h as usize, w as usize) == (target_h, target_w) {
        return ImageTensor::from_rgb32f(img);
    }
    let resized = image::imageops::resize(img, target_w as u32, target_h as u32, FilterType::Triangle);
    ImageTensor::from_rgb32f(&resized)
}
