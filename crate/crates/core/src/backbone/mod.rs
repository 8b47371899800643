//! Frozen feature extractors.
//!
//! A backbone turns an image into one globally pooled feature vector. Real
//! backbones are serialized network files described by a JSON registry;
//! [`StubBackbone`] is a model-free extractor with the same contract.

mod cache;
mod stub;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageTensor;
use crate::error::{Error, Result};

pub use cache::{content_hash, FeatureCache, CACHE_MAGIC, CACHE_VERSION};
pub use stub::StubBackbone;

/// The nine ImageNet backbones with the width of their pooled output.
pub const KNOWN_BACKBONES: [(&str, usize); 9] = [
    ("InceptionV3", 2048),
    ("Xception", 2048),
    ("DenseNet121", 1024),
    ("DenseNet201", 1920),
    ("DenseNet169", 1664),
    ("ResNet50", 2048),
    ("NASNetMobile", 1056),
    ("VGG19", 512),
    ("MobileNetV2", 1280),
];

pub const DEFAULT_INPUT_SIZE: usize = 224;

pub fn known_feature_dim(name: &str) -> Option<usize> {
    KNOWN_BACKBONES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|&(_, d)| d)
}

/// Trainable parameters of a dense softmax head on `feature_dim` inputs.
pub fn head_param_count(feature_dim: usize, num_classes: usize) -> usize {
    (feature_dim + 1) * num_classes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Preprocessing {
    #[default]
    #[serde(rename = "scale_0_1")]
    Scale01,
    #[serde(rename = "scale_pm1")]
    ScalePm1,
    #[serde(rename = "imagenet_mean_std")]
    ImagenetMeanStd,
}

impl Preprocessing {
    const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
    const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

    /// Maps a [0, 1] HWC image into the network's expected input range.
    pub fn apply(self, image: &ImageTensor) -> Vec<f32> {
        let data = image.data();
        match self {
            Preprocessing::Scale01 => data.to_vec(),
            Preprocessing::ScalePm1 => data.iter().map(|v| v * 2.0 - 1.0).collect(),
            Preprocessing::ImagenetMeanStd => data
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let c = i % ImageTensor::CHANNELS;
                    (v - Self::IMAGENET_MEAN[c]) / Self::IMAGENET_STD[c]
                })
                .collect(),
        }
    }
}

/// One registry entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneManifest {
    pub name: String,
    /// Serialized network, relative to the registry file unless absolute.
    #[serde(default)]
    pub model_path: Option<PathBuf>,
    pub input_h: usize,
    pub input_w: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub preprocessing: Preprocessing,
    /// Present for model-free grid-mean extractors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stub_grid: Option<usize>,
}

impl BackboneManifest {
    pub fn stub(name: impl Into<String>, grid: usize, input: usize) -> Self {
        Self {
            name: name.into(),
            model_path: None,
            input_h: input,
            input_w: input,
            feature_dim: StubBackbone::feature_dim_for(grid),
            preprocessing: Preprocessing::Scale01,
            stub_grid: Some(grid),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config(format!("backbone {}: feature_dim must be > 0", self.name)));
        }
        if self.input_h == 0 || self.input_w == 0 {
            return Err(Error::Config(format!("backbone {}: input size must be nonzero", self.name)));
        }
        match (self.stub_grid, &self.model_path) {
            (Some(g), _) => {
                if StubBackbone::feature_dim_for(g) != self.feature_dim {
                    return Err(Error::Config(format!(
                        "backbone {}: stub grid {g} produces {} features, manifest declares {}",
                        self.name,
                        StubBackbone::feature_dim_for(g),
                        self.feature_dim
                    )));
                }
            }
            (None, None) => {
                return Err(Error::Config(format!(
                    "backbone {}: needs either model_path or stub_grid",
                    self.name
                )))
            }
            (None, Some(_)) => {}
        }
        if let Some(expected) = known_feature_dim(&self.name) {
            if self.stub_grid.is_none() && expected != self.feature_dim {
                log::warn!(
                    "backbone {} declares feature_dim {} but its pooled output is normally {}",
                    self.name,
                    self.feature_dim,
                    expected
                );
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub backbones: Vec<BackboneManifest>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Registry {
    pub fn new(backbones: Vec<BackboneManifest>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let registry = Self {
            backbones,
            base_dir: base_dir.into(),
        };
        registry.validate()?;
        Ok(registry)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut registry: Registry = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        registry.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        registry.validate()?;
        Ok(registry)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    fn validate(&self) -> Result<()> {
        let mut names = std::collections::HashSet::new();
        for b in &self.backbones {
            b.validate()?;
            if !names.insert(b.name.as_str()) {
                return Err(Error::Config(format!("duplicate backbone name `{}` in registry", b.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&BackboneManifest> {
        self.backbones.iter().find(|b| b.name == name).ok_or_else(|| {
            Error::Config(format!(
                "backbone `{name}` is not in the registry (available: {})",
                self.backbones.iter().map(|b| b.name.as_str()).collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn resolve_model_path(&self, manifest: &BackboneManifest) -> Option<PathBuf> {
        manifest.model_path.as_ref().map(|p| self.base_dir.join(p))
    }

    pub fn load_backbone(&self, name: &str) -> Result<Backbone> {
        let manifest = self.get(name)?.clone();
        let model_path = self.resolve_model_path(&manifest);
        Backbone::load(manifest, model_path.as_deref())
    }
}

/// A network run on one preprocessed HWC buffer.
pub trait FeatureExtractor: Send + Sync {
    fn run(&self, input: &[f32], height: usize, width: usize) -> Result<Vec<f32>>;
}

/// A loaded, immutable backbone.
pub struct Backbone {
    manifest: BackboneManifest,
    extractor: Box<dyn FeatureExtractor>,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone").field("manifest", &self.manifest).finish_non_exhaustive()
    }
}

impl Backbone {
    pub fn load(manifest: BackboneManifest, model_path: Option<&Path>) -> Result<Self> {
        manifest.validate()?;
        let extractor: Box<dyn FeatureExtractor> = match manifest.stub_grid {
            Some(grid) => Box::new(StubBackbone::new(grid, manifest.input_h, manifest.input_w)?),
            None => load_model(&manifest, model_path)?,
        };
        Ok(Self { manifest, extractor })
    }

    pub fn with_extractor(manifest: BackboneManifest, extractor: Box<dyn FeatureExtractor>) -> Self {
        Self { manifest, extractor }
    }

    pub fn manifest(&self) -> &BackboneManifest {
        &self.manifest
    }

    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn feature_dim(&self) -> usize {
        self.manifest.feature_dim
    }

    /// Features for one image of the declared input size.
    pub fn features(&self, image: &ImageTensor) -> Result<Vec<f32>> {
        let (h, w) = (self.manifest.input_h, self.manifest.input_w);
        if (image.height(), image.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "backbone {} expects {h}x{w} input, got {}x{}",
                self.manifest.name,
                image.height(),
                image.width()
            )));
        }
        let input = self.manifest.preprocessing.apply(image);
        let out = self.extractor.run(&input, h, w)?;
        if out.len() != self.manifest.feature_dim {
            return Err(Error::Shape(format!(
                "feature_dim mismatch: backbone {} declares {} but produced {}",
                self.manifest.name,
                self.manifest.feature_dim,
                out.len()
            )));
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "backbone {} produced non-finite features",
                self.manifest.name
            )));
        }
        Ok(out)
    }
}

fn load_model(manifest: &BackboneManifest, model_path: Option<&Path>) -> Result<Box<dyn FeatureExtractor>> {
    let path = require_model_file(manifest, model_path)?;
    Err(Error::Model(format!(
        "cannot load {}: this build has no runtime for serialized networks; use a stub backbone entry",
        path.display()
    )))
}

fn require_model_file(manifest: &BackboneManifest, model_path: Option<&Path>) -> Result<PathBuf> {
    let path = model_path
        .map(Path::to_path_buf)
        .or_else(|| manifest.model_path.clone())
        .ok_or_else(|| Error::Config(format!("backbone {} has no model_path", manifest.name)))?;
    if !path.is_file() {
        return Err(Error::Model(format!(
            "model file {} for backbone {} does not exist",
            path.display(),
            manifest.name
        )));
    }
    Ok(path)
}

/// N x D pooled features with the manifest row id of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    cols: usize,
    data: Vec<f32>,
    row_ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(cols: usize, data: Vec<f32>, row_ids: Vec<String>) -> Result<Self> {
        if data.len() != cols * row_ids.len() {
            return Err(Error::Shape(format!(
                "{} rows x {cols} columns needs {} values, got {}",
                row_ids.len(),
                cols * row_ids.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature matrix contains NaN or Inf".into()));
        }
        Ok(Self { cols, data, row_ids })
    }

    pub fn empty(cols: usize) -> Self {
        Self {
            cols,
            data: Vec::new(),
            row_ids: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    /// Row-major copy widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Plain CSV: `row_id,f0,...,f{D-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| Error::csv(path, e))?;
        let mut header = vec!["row_id".to_string()];
        header.extend((0..self.cols).map(|j| format!("f{j}")));
        w.write_record(&header).map_err(|e| Error::csv(path, e))?;
        for (i, id) in self.row_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Pooled features for `images`, in input order.
pub fn extract_features(backbone: &Backbone, images: &[ImageTensor], row_ids: Vec<String>) -> Result<FeatureMatrix> {
    if images.len() != row_ids.len() {
        return Err(Error::Shape(format!(
            "{} images but {} row ids",
            images.len(),
            row_ids.len()
        )));
    }
    let rows: Vec<Vec<f32>> = images.par_iter().map(|img| backbone.features(img)).collect::<Result<_>>()?;
    FeatureMatrix::new(backbone.feature_dim(), rows.concat(), row_ids)
}
