//! Stage orchestration over a run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.json                     settings that determine the results
//! ledger.json                     stage status, fingerprints, timings
//! split/{train,val,test}/<class>/ copied images plus augmented copies
//! split/manifest.csv
//! augment/manifest.csv            split manifest plus augmented records
//! features/<backbone>/            {train,val,test}.bin + .ids.csv
//! models/<backbone>/              head.json, history.csv, loss.svg,
//!                                 accuracy.svg, test_probs.csv,
//!                                 confusion.csv, confusion.svg, metrics.json
//! ensembles/<name>/               predictions.csv, confusion.*, metrics.json
//! report/                         report.md, table6.csv, table7.csv,
//!                                 report.json, comparison.svg
//! ```

pub mod config;
pub mod ledger;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

pub use config::{slug, Overrides, PipelineConfig};
pub use ledger::{RunLedger, StageRecord, StageStatus, LEDGER_FILE};

use crate::augmentation::augment_split;
use crate::backbone::{content_hash, Backbone, FeatureCache, FeatureMatrix, Registry};
use crate::dataset::{
    load_image, materialize_split, scan_dataset, stratified_split, DatasetManifest, Split, MANIFEST_FILE,
};
use crate::ensemble::{csv_field, ProbabilityMatrix};
use crate::error::{Error, Result};
use crate::head::{train, HeadFile};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::report::{emit_report, render_confusion, render_history};
use crate::seed;

pub const RUNS_DIR: &str = "runs";
pub const LATEST_FILE: &str = "latest";
pub const CONFIG_SNAPSHOT: &str = "config.json";

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Split,
    Augment,
    Extract,
    Train,
    Evaluate,
    Ensemble,
    Report,
}

/// Whether a stage ran or was satisfied by the ledger.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: String,
    pub executed: bool,
}

struct Tracker {
    run_dir: PathBuf,
    ledger: RunLedger,
    force: bool,
    outcomes: Vec<StageOutcome>,
}

impl Tracker {
    /// Runs `action` unless the ledger shows the same inputs already
    /// produced outputs that are still intact. Returns the output digest.
    fn stage(
        &mut self,
        key: &str,
        input_hash: String,
        action: impl FnOnce(&Path) -> Result<Vec<PathBuf>>,
    ) -> Result<String> {
        if !self.force && self.ledger.is_fresh(key, &input_hash, &self.run_dir) {
            log::info!("{key}: up to date");
            self.outcomes.push(StageOutcome { stage: key.into(), executed: false });
            return Ok(self.ledger.get(key).expect("fresh stage is recorded").output_digest());
        }
        log::info!("{key}: running");
        let start = Instant::now();
        let result = action(&self.run_dir).and_then(|outs| ledger::hash_outputs(&self.run_dir, &outs));
        let finished_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        let seconds = start.elapsed().as_secs_f64();
        let ledger_path = self.run_dir.join(LEDGER_FILE);
        match result {
            Ok(outputs) => {
                let record = StageRecord {
                    status: StageStatus::Done,
                    input_hash,
                    outputs,
                    finished_at,
                    seconds,
                    error: None,
                };
                let digest = record.output_digest();
                self.ledger.record(key, record);
                self.ledger.save(&ledger_path)?;
                self.outcomes.push(StageOutcome { stage: key.into(), executed: true });
                Ok(digest)
            }
            Err(e) => {
                self.ledger.record(
                    key,
                    StageRecord {
                        status: StageStatus::Failed,
                        input_hash,
                        outputs: Default::default(),
                        finished_at,
                        seconds,
                        error: Some(e.to_string()),
                    },
                );
                self.ledger.save(&ledger_path)?;
                Err(e.in_stage(key))
            }
        }
    }
}

/// A run directory bound to one effective configuration.
pub struct Pipeline {
    config: PipelineConfig,
    tracker: Tracker,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn json_of<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("value serializes")
}

impl Pipeline {
    /// Opens `<out>/runs/<timestamp>-<hash8>`, reusing an existing run
    /// directory whose configuration hash matches, and points
    /// `<out>/latest` at it.
    pub fn open(config: PipelineConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let runs = config.paths.out.join(RUNS_DIR);
        create_dir(&runs)?;
        let suffix = format!("-{}", config.hash8());
        let mut existing: Vec<String> = fs::read_dir(&runs)
            .map_err(|e| Error::io(&runs, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.ends_with(&suffix))
            .collect();
        existing.sort();
        let name = existing
            .pop()
            .unwrap_or_else(|| format!("{}{suffix}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ")));
        let run_dir = runs.join(&name);
        create_dir(&run_dir)?;
        write(&run_dir.join(CONFIG_SNAPSHOT), config.fingerprint_json() + "\n")?;
        write(&config.paths.out.join(LATEST_FILE), format!("{RUNS_DIR}/{name}\n"))?;
        let ledger = RunLedger::load(&run_dir.join(LEDGER_FILE))?;
        Ok(Self {
            config,
            tracker: Tracker { run_dir, ledger, force, outcomes: Vec::new() },
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn run_dir(&self) -> &Path {
        &self.tracker.run_dir
    }

    pub fn ledger(&self) -> &RunLedger {
        &self.tracker.ledger
    }

    /// Stages run or skipped so far, in order.
    pub fn outcomes(&self) -> &[StageOutcome] {
        &self.tracker.outcomes
    }

    /// Runs every stage up to and including `last`.
    pub fn run_until(&mut self, last: Stage) -> Result<()> {
        let split = self.split()?;
        if last == Stage::Split {
            return Ok(());
        }
        let augment = self.augment(&split)?;
        if last == Stage::Augment {
            return Ok(());
        }
        let registry = self.config.registry()?;
        let selected = self.config.backbones.selected.clone();
        let mut extracted = Vec::new();
        for bb in &selected {
            extracted.push(self.extract(&registry, bb, &augment)?);
        }
        if last == Stage::Extract {
            return Ok(());
        }
        let mut trained = Vec::new();
        for (bb, ex) in selected.iter().zip(&extracted) {
            trained.push(self.train(bb, ex)?);
        }
        if last == Stage::Train {
            return Ok(());
        }
        let mut evaluated = HashMap::new();
        for ((bb, ex), tr) in selected.iter().zip(&extracted).zip(&trained) {
            evaluated.insert(bb.clone(), self.evaluate(bb, tr, ex)?);
        }
        if last == Stage::Evaluate {
            return Ok(());
        }
        let mut combined = Vec::new();
        for spec in self.config.ensembles.clone() {
            let digests: Vec<&str> = spec.members.iter().map(|m| evaluated[m].as_str()).collect();
            combined.push(self.ensemble(&spec, &digests)?);
        }
        if last == Stage::Ensemble {
            return Ok(());
        }
        let upstream: Vec<String> = selected
            .iter()
            .map(|bb| evaluated[bb].clone())
            .chain(combined)
            .collect();
        self.report(&upstream)?;
        Ok(())
    }

    fn split(&mut self) -> Result<String> {
        let root = self.config.paths.dataset_root.clone();
        let scanned = scan_dataset(&root).map_err(|e| e.in_stage("split"))?;
        let listing: Vec<String> = scanned
            .records()
            .par_iter()
            .map(|r| {
                let rel = r.path.strip_prefix(&root).unwrap_or(&r.path);
                Ok(format!("{}\t{}", crate::dataset::path_to_id(rel), ledger::hash_file(&r.path)?))
            })
            .collect::<Result<_>>()
            .map_err(|e: Error| e.in_stage("split"))?;
        let mut parts = vec!["split".to_string(), self.config.seed.to_string(), json_of(&self.config.split)];
        parts.extend(listing);
        let (ratios, seed) = (self.config.split, self.config.seed);
        self.tracker.stage("split", ledger::digest_parts(&parts), |run| {
            let dir = run.join("split");
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            let assigned = stratified_split(&scanned, &ratios, seed)?;
            let materialized = materialize_split(&assigned, &dir)?;
            let mut outs = vec![PathBuf::from("split").join(MANIFEST_FILE)];
            outs.extend(materialized.records().iter().map(|r| Path::new("split").join(&r.path)));
            Ok(outs)
        })
    }

    fn augment(&mut self, split_digest: &str) -> Result<String> {
        let c = &self.config;
        let parts = [
            "augment".to_string(),
            split_digest.to_string(),
            c.seed.to_string(),
            json_of(&c.augmentation),
            json_of(&c.images),
        ];
        let (aug, images, seed) = (c.augmentation, c.images, c.seed);
        self.tracker.stage("augment", ledger::digest_parts(&parts), |run| {
            let base = run.join("split");
            let manifest = DatasetManifest::read_csv(&base.join(MANIFEST_FILE))?;
            let full = augment_split(&manifest, &base, &aug, seed, images.height, images.width)?;
            let dir = run.join("augment");
            create_dir(&dir)?;
            full.write_csv(&dir.join(MANIFEST_FILE))?;
            let original: std::collections::HashSet<&PathBuf> = manifest.records().iter().map(|r| &r.path).collect();
            let mut outs = vec![PathBuf::from("augment").join(MANIFEST_FILE)];
            outs.extend(
                full.records()
                    .iter()
                    .filter(|r| !original.contains(&r.path))
                    .map(|r| Path::new("split").join(&r.path)),
            );
            Ok(outs)
        })
    }

    fn extract(&mut self, registry: &Registry, bb: &str, augment_digest: &str) -> Result<String> {
        let manifest = registry.get(bb)?.clone();
        let model_hash = match registry.resolve_model_path(&manifest) {
            Some(p) if p.is_file() => ledger::hash_file(&p)?,
            _ => "none".into(),
        };
        let fingerprint = format!("{}\n{model_hash}\n", json_of(&manifest));
        let parts = ["extract", bb, augment_digest, fingerprint.as_str()];
        let key = format!("extract/{bb}");
        self.tracker.stage(&key, ledger::digest_parts(&parts), |run| {
            let backbone = registry.load_backbone(bb)?;
            let base = run.join("split");
            let full = DatasetManifest::read_csv(&run.join("augment").join(MANIFEST_FILE))?;
            let rel_dir = PathBuf::from("features").join(bb);
            let dir = run.join(&rel_dir);
            create_dir(&dir)?;
            let stamp = dir.join("backbone.txt");
            let reusable = fs::read_to_string(&stamp).is_ok_and(|s| s == fingerprint);
            let mut outs = vec![rel_dir.join("backbone.txt")];
            for split in Split::ASSIGNED {
                let bin = dir.join(format!("{split}.bin"));
                let previous = if reusable { FeatureCache::read(&bin).ok() } else { None };
                let cache = extract_split(&backbone, &full, &base, split, previous.as_ref())?;
                cache.write(&bin)?;
                outs.push(rel_dir.join(format!("{split}.bin")));
                outs.push(rel_dir.join(format!("{split}.ids.csv")));
            }
            write(&stamp, &fingerprint)?;
            Ok(outs)
        })
    }

    fn train(&mut self, bb: &str, extract_digest: &str) -> Result<String> {
        let mut cfg = self.config.train;
        cfg.seed = seed::derive(self.config.seed, &format!("train/{bb}"));
        let parts = ["train", bb, extract_digest, &json_of(&cfg)];
        let key = format!("train/{bb}");
        self.tracker.stage(&key, ledger::digest_parts(&parts), |run| {
            let full = DatasetManifest::read_csv(&run.join("augment").join(MANIFEST_FILE))?;
            let labels = label_map(&full);
            let features = run.join("features").join(bb);
            let train_set = FeatureCache::read(&features.join("train.bin"))?.features;
            let val_set = FeatureCache::read(&features.join("val.bin"))?.features;
            let train_y = lookup_labels(&labels, &train_set)?;
            let val_y = lookup_labels(&labels, &val_set)?;
            let (head, history) = train(&train_set, &train_y, &val_set, &val_y, full.classes().len(), &cfg)?;
            let rel_dir = PathBuf::from("models").join(bb);
            let dir = run.join(&rel_dir);
            create_dir(&dir)?;
            HeadFile::new(bb, full.classes(), &head, &cfg, &history).write(&dir.join("head.json"))?;
            history.write_csv(&dir.join("history.csv"))?;
            let (loss, acc) = render_history(&history, bb)?;
            write(&dir.join("loss.svg"), loss)?;
            write(&dir.join("accuracy.svg"), acc)?;
            Ok(["head.json", "history.csv", "loss.svg", "accuracy.svg"].iter().map(|f| rel_dir.join(f)).collect())
        })
    }

    fn evaluate(&mut self, bb: &str, train_digest: &str, extract_digest: &str) -> Result<String> {
        let positive = self.config.report.positive_class.clone();
        let parts = ["evaluate", bb, train_digest, extract_digest, positive.as_str()];
        let key = format!("evaluate/{bb}");
        self.tracker.stage(&key, ledger::digest_parts(&parts), |run| {
            let full = DatasetManifest::read_csv(&run.join("augment").join(MANIFEST_FILE))?;
            let rel_dir = PathBuf::from("models").join(bb);
            let dir = run.join(&rel_dir);
            let head_file = HeadFile::read(&dir.join("head.json"))?;
            let head = head_file.head()?;
            let test = FeatureCache::read(&run.join("features").join(bb).join("test.bin"))?.features;
            let probs = head.predict_proba(&test)?;
            let matrix = ProbabilityMatrix::new(bb, test.row_ids().to_vec(), head.num_classes(), probs)?;
            matrix.write_csv(&dir.join("test_probs.csv"))?;
            let truth = lookup_labels(&label_map(&full), &test)?;
            let pred = matrix.argmax().indices;
            write_evaluation(&dir, bb, &truth, &pred, full.classes(), &positive)?;
            Ok(["test_probs.csv", "confusion.csv", "confusion.svg", "metrics.json"]
                .iter()
                .map(|f| rel_dir.join(f))
                .collect())
        })
    }

    fn ensemble(&mut self, spec: &crate::ensemble::EnsembleSpec, member_digests: &[&str]) -> Result<String> {
        let positive = self.config.report.positive_class.clone();
        let mut parts = vec!["ensemble".to_string(), json_of(spec), positive.clone()];
        parts.extend(member_digests.iter().map(|d| d.to_string()));
        let name = slug(&spec.name);
        let key = format!("ensemble/{name}");
        self.tracker.stage(&key, ledger::digest_parts(&parts), |run| {
            let full = DatasetManifest::read_csv(&run.join("augment").join(MANIFEST_FILE))?;
            let mats = spec
                .members
                .iter()
                .map(|m| ProbabilityMatrix::read_csv(&run.join("models").join(m).join("test_probs.csv"), m.as_str()))
                .collect::<Result<Vec<_>>>()?;
            let pred = spec.combine(&mats)?.indices;
            let labels = label_map(&full);
            let truth = mats[0]
                .row_ids()
                .iter()
                .map(|id| lookup(&labels, id))
                .collect::<Result<Vec<_>>>()?;
            let rel_dir = PathBuf::from("ensembles").join(&name);
            let dir = run.join(&rel_dir);
            create_dir(&dir)?;
            let mut csv = String::from("row_id,predicted\n");
            for (id, &p) in mats[0].row_ids().iter().zip(&pred) {
                let _ = writeln!(csv, "{},{}", csv_field(id), csv_field(&full.classes()[p]));
            }
            write(&dir.join("predictions.csv"), csv)?;
            write_evaluation(&dir, &spec.name, &truth, &pred, full.classes(), &positive)?;
            Ok(["predictions.csv", "confusion.csv", "confusion.svg", "metrics.json"]
                .iter()
                .map(|f| rel_dir.join(f))
                .collect())
        })
    }

    fn report(&mut self, upstream: &[String]) -> Result<String> {
        let positive = self.config.report.positive_class.clone();
        let mut parts = vec!["report".to_string(), positive.clone()];
        parts.extend(upstream.iter().cloned());
        let metric_files: Vec<PathBuf> = self
            .config
            .backbones
            .selected
            .iter()
            .map(|bb| PathBuf::from("models").join(bb).join("metrics.json"))
            .chain(
                self.config
                    .ensembles
                    .iter()
                    .map(|e| PathBuf::from("ensembles").join(slug(&e.name)).join("metrics.json")),
            )
            .collect();
        self.tracker.stage("report", ledger::digest_parts(&parts), |run| {
            let results = metric_files
                .iter()
                .map(|p| MetricsReport::read_json(&run.join(p)))
                .collect::<Result<Vec<_>>>()?;
            emit_report(&run.join("report"), &results, &positive)?;
            Ok(["report.md", "table6.csv", "table7.csv", "report.json", "comparison.svg"]
                .iter()
                .map(|f| Path::new("report").join(f))
                .collect())
        })
    }

    /// The materialized split manifest of this run.
    pub fn split_manifest(&self) -> Result<DatasetManifest> {
        DatasetManifest::read_csv(&self.run_dir().join("split").join(MANIFEST_FILE))
    }
}

fn extract_split(
    backbone: &Backbone,
    manifest: &DatasetManifest,
    base: &Path,
    split: Split,
    previous: Option<&FeatureCache>,
) -> Result<FeatureCache> {
    let known = previous.map(|c| c.by_hash());
    let m = backbone.manifest();
    let records: Vec<_> = manifest.in_split(split).collect();
    let rows: Vec<(Vec<f32>, String)> = records
        .par_iter()
        .map(|r| {
            let path = base.join(&r.path);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let hash = content_hash(&bytes);
            if let Some(row) = known.as_ref().and_then(|k| k.get(hash.as_str())) {
                if row.len() == backbone.feature_dim() {
                    return Ok((row.to_vec(), hash));
                }
            }
            let image = load_image(&path, m.input_h, m.input_w)?;
            Ok((backbone.features(&image)?, hash))
        })
        .collect::<Result<_>>()?;
    let ids = records.iter().map(|r| r.id()).collect();
    let (data, hashes): (Vec<Vec<f32>>, Vec<String>) = rows.into_iter().unzip();
    FeatureCache::new(FeatureMatrix::new(backbone.feature_dim(), data.concat(), ids)?, hashes)
}

fn label_map(manifest: &DatasetManifest) -> HashMap<String, usize> {
    manifest.records().iter().map(|r| (r.id(), r.label)).collect()
}

fn lookup(labels: &HashMap<String, usize>, id: &str) -> Result<usize> {
    labels
        .get(id)
        .copied()
        .ok_or_else(|| Error::Dataset(format!("row `{id}` is not in the dataset manifest")))
}

fn lookup_labels(labels: &HashMap<String, usize>, features: &FeatureMatrix) -> Result<Vec<usize>> {
    features.row_ids().iter().map(|id| lookup(labels, id)).collect()
}

fn write_evaluation(
    dir: &Path,
    model: &str,
    truth: &[usize],
    pred: &[usize],
    classes: &[String],
    positive: &str,
) -> Result<()> {
    let cm = ConfusionMatrix::from_predictions(truth, pred, classes.len())?;
    cm.write_csv(&dir.join("confusion.csv"), classes)?;
    write(&dir.join("confusion.svg"), render_confusion(&cm, classes, &format!("{model}: confusion matrix"))?)?;
    if classes.len() == 2 && !classes.iter().any(|c| c == positive) {
        log::warn!("positive class `{positive}` is not one of {classes:?}; sensitivity and specificity omitted");
    }
    MetricsReport::compute(model, &cm, classes, positive)?.write_json(&dir.join("metrics.json"))
}

/// Per-split image counts by class, with totals.
pub fn split_summary(manifest: &DatasetManifest) -> String {
    let classes = manifest.classes();
    let width = classes.iter().map(|c| c.len()).max().unwrap_or(0).max(8);
    let mut out = format!("{:<12}", "Dataset");
    for c in classes {
        let _ = write!(out, " {c:>width$}");
    }
    let _ = writeln!(out, " {:>width$}", "Total");
    for (split, label) in [(Split::Train, "Training"), (Split::Val, "Validation"), (Split::Test, "Testing")] {
        let counts = manifest.split_counts(split);
        let _ = write!(out, "{label:<12}");
        for n in &counts {
            let _ = write!(out, " {n:>width$}");
        }
        let _ = writeln!(out, " {:>width$}", counts.iter().sum::<usize>());
    }
    out
}
