//! Pipeline configuration: a TOML document, `PIPELINE_*` environment
//! overrides, then command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmentation::AugmentationConfig;
use crate::backbone::Registry;
use crate::dataset::SplitRatios;
use crate::ensemble::EnsembleSpec;
use crate::error::{Error, Result};
use crate::head::TrainConfig;

pub const ENV_DATASET_ROOT: &str = "PIPELINE_DATASET_ROOT";
pub const ENV_OUT: &str = "PIPELINE_OUT";
pub const ENV_SEED: &str = "PIPELINE_SEED";
pub const ENV_REGISTRY: &str = "PIPELINE_REGISTRY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset_root: PathBuf,
    pub out: PathBuf,
    pub registry: PathBuf,
}

/// Size of the stored augmented copies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    pub height: usize,
    pub width: usize,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self { height: 224, width: 224 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSelection {
    pub selected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub positive_class: String,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { positive_class: "Diabetic".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default)]
    pub split: SplitRatios,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    #[serde(default)]
    pub images: ImageConfig,
    #[serde(default)]
    pub backbones: BackboneSelection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ensembles: Vec<EnsembleSpec>,
    #[serde(default)]
    pub report: ReportConfig,
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset_root: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub backbones: Vec<String>,
}

impl PipelineConfig {
    /// Parses TOML; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        for p in [
            &mut config.paths.dataset_root,
            &mut config.paths.out,
            &mut config.paths.registry,
        ] {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        Ok(config)
    }

    /// Reads the file, applies environment then command-line overrides and
    /// validates the result.
    pub fn load(
        path: &Path,
        env: impl Fn(&str) -> Option<String>,
        overrides: &Overrides,
    ) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut config = Self::from_toml(&text, base)?;
        config.apply_env(env)?;
        config.apply_overrides(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = env(ENV_DATASET_ROOT) {
            self.paths.dataset_root = v.into();
        }
        if let Some(v) = env(ENV_OUT) {
            self.paths.out = v.into();
        }
        if let Some(v) = env(ENV_REGISTRY) {
            self.paths.registry = v.into();
        }
        if let Some(v) = env(ENV_SEED) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_SEED} must be an unsigned integer, got `{v}`")))?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.paths.out = p.clone();
        }
        if let Some(p) = &o.dataset_root {
            self.paths.dataset_root = p.clone();
        }
        if let Some(p) = &o.registry {
            self.paths.registry = p.clone();
        }
        if !o.backbones.is_empty() {
            self.backbones.selected = o.backbones.clone();
            let selected = &self.backbones.selected;
            self.ensembles.retain(|e| e.members.iter().all(|m| selected.contains(m)));
        }
    }

    /// Checks everything that does not need the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.augmentation
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.images.height == 0 || self.images.width == 0 {
            return Err(Error::Config("image height and width must be positive".into()));
        }
        if self.backbones.selected.is_empty() {
            return Err(Error::Config("no backbones selected".into()));
        }
        for (i, name) in self.backbones.selected.iter().enumerate() {
            if self.backbones.selected[..i].contains(name) {
                return Err(Error::Config(format!("backbone `{name}` selected twice")));
            }
        }
        let mut slugs = Vec::new();
        for e in &self.ensembles {
            e.validate()?;
            if let Some(m) = e.members.iter().find(|m| !self.backbones.selected.contains(m)) {
                return Err(Error::Config(format!(
                    "ensemble `{}` uses `{m}`, which is not a selected backbone",
                    e.name
                )));
            }
            let slug = slug(&e.name);
            if slugs.contains(&slug) || self.backbones.selected.iter().any(|b| slug == self::slug(b)) {
                return Err(Error::Config(format!("ensemble name `{}` collides with another model", e.name)));
            }
            slugs.push(slug);
        }
        if self.report.positive_class.is_empty() {
            return Err(Error::Config("report.positive_class is empty".into()));
        }
        Ok(())
    }

    /// Loads the registry and checks that every selected backbone is in it.
    pub fn registry(&self) -> Result<Registry> {
        if !self.paths.registry.is_file() {
            return Err(Error::Config(format!(
                "backbone registry {} does not exist",
                self.paths.registry.display()
            )));
        }
        let registry = Registry::load(&self.paths.registry)?;
        for name in &self.backbones.selected {
            registry.get(name)?;
        }
        Ok(registry)
    }

    /// Settings that determine the results, i.e. everything except the
    /// output location, as canonical JSON.
    pub fn fingerprint_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(paths) = value.get_mut("paths").and_then(|p| p.as_object_mut()) {
            paths.remove("out");
        }
        serde_json::to_string_pretty(&value).expect("config serializes")
    }

    /// First eight hex digits of the fingerprint's digest.
    pub fn hash8(&self) -> String {
        hex::encode(Sha256::digest(self.fingerprint_json().as_bytes()))[..8].to_string()
    }
}

/// Directory-safe form of a model name.
pub fn slug(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for ch in name.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}
