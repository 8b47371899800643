//! Probability-level ensembling: plain and weighted summation followed by a
//! per-row argmax (lowest class index wins ties).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-model N x C class probabilities keyed by row id.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    model_name: String,
    row_ids: Vec<String>,
    num_classes: usize,
    /// Row-major.
    values: Vec<f64>,
}

impl ProbabilityMatrix {
    pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(model_name: impl Into<String>, row_ids: Vec<String>, num_classes: usize, values: Vec<f64>) -> Result<Self> {
        let model_name = model_name.into();
        if num_classes == 0 {
            return Err(Error::Shape(format!("{model_name}: probability matrix needs at least one class")));
        }
        if values.len() != row_ids.len() * num_classes {
            return Err(Error::Shape(format!(
                "{model_name}: {} rows x {num_classes} classes needs {} values, got {}",
                row_ids.len(),
                row_ids.len() * num_classes,
                values.len()
            )));
        }
        for (i, row) in values.chunks_exact(num_classes).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidInput(format!(
                    "{model_name}: row {} has a probability outside [0, 1]",
                    row_ids[i]
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > Self::ROW_SUM_TOLERANCE {
                return Err(Error::InvalidInput(format!(
                    "{model_name}: row {} sums to {sum}, not 1",
                    row_ids[i]
                )));
            }
        }
        Ok(Self {
            model_name,
            row_ids,
            num_classes,
            values,
        })
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn argmax(&self) -> PredictionVector {
        PredictionVector {
            indices: (0..self.rows()).map(|i| argmax(self.row(i))).collect(),
        }
    }

    /// `row_id,p_class0,...,p_class{C-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("row_id");
        for c in 0..self.num_classes {
            out.push_str(&format!(",p_class{c}"));
        }
        out.push('\n');
        for (i, id) in self.row_ids.iter().enumerate() {
            out.push_str(&csv_field(id));
            for p in self.row(i) {
                out.push_str(&format!(",{p}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, model_name: impl Into<String>) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let header = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        let num_classes = header.len().saturating_sub(1);
        let expected: Vec<String> = std::iter::once("row_id".to_string())
            .chain((0..num_classes).map(|c| format!("p_class{c}")))
            .collect();
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Dataset(format!(
                "{}: expected header `{}`",
                path.display(),
                expected.join(",")
            )));
        }
        let mut row_ids = Vec::new();
        let mut values = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            row_ids.push(rec[0].to_string());
            for field in rec.iter().skip(1) {
                values.push(field.trim().parse::<f64>().map_err(|_| {
                    Error::Dataset(format!("{}: bad probability `{field}`", path.display()))
                })?);
            }
        }
        Self::new(model_name, row_ids, num_classes, values)
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Predicted class index per row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionVector {
    pub indices: Vec<usize>,
}

impl PredictionVector {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Members and optional per-member weights of one ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub name: String,
    pub members: Vec<String>,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::Config(format!("ensemble `{}` has no members", self.name)));
        }
        if let Some(w) = &self.weights {
            check_weights(w, self.members.len())
                .map_err(|e| Error::Config(format!("ensemble `{}`: {e}", self.name)))?;
        }
        Ok(())
    }

    pub fn combine(&self, mats: &[ProbabilityMatrix]) -> Result<PredictionVector> {
        match &self.weights {
            Some(w) => weighted_ensemble(mats, w),
            None => average_ensemble(mats),
        }
    }
}

fn check_weights(weights: &[f64], members: usize) -> Result<()> {
    if weights.len() != members {
        return Err(Error::InvalidInput(format!(
            "{} weights given for {members} members",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::InvalidInput(format!("ensemble weights must be positive, got {w}")));
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_congruent(mats: &[ProbabilityMatrix]) -> Result<&ProbabilityMatrix> {
    let first = mats
        .first()
        .ok_or_else(|| Error::InvalidInput("ensemble needs at least one probability matrix".into()))?;
    for m in &mats[1..] {
        if m.num_classes != first.num_classes || m.rows() != first.rows() {
            return Err(Error::Shape(format!(
                "{} is {}x{} but {} is {}x{}",
                m.model_name,
                m.rows(),
                m.num_classes,
                first.model_name,
                first.rows(),
                first.num_classes
            )));
        }
        if m.row_ids != first.row_ids {
            return Err(Error::Shape(format!(
                "{} and {} list different test rows or orders",
                m.model_name, first.model_name
            )));
        }
    }
    Ok(first)
}

/// Element-wise sum of the member matrices, then argmax per row.
pub fn average_ensemble(mats: &[ProbabilityMatrix]) -> Result<PredictionVector> {
    let first = check_congruent(mats)?;
    let mut summed = first.values.clone();
    for m in &mats[1..] {
        for (q, &p) in summed.iter_mut().zip(&m.values) {
            *q += p;
        }
    }
    Ok(PredictionVector {
        indices: summed.chunks_exact(first.num_classes).map(argmax).collect(),
    })
}

/// Weighted element-wise sum of the member matrices, then argmax per row.
pub fn weighted_ensemble(mats: &[ProbabilityMatrix], weights: &[f64]) -> Result<PredictionVector> {
    let first = check_congruent(mats)?;
    check_weights(weights, mats.len())?;
    let c = first.num_classes;
    let mut summed = vec![0.0; first.values.len()];
    for (m, &w) in mats.iter().zip(weights) {
        for (q, &p) in summed.iter_mut().zip(&m.values) {
            *q += w * p;
        }
    }
    Ok(PredictionVector {
        indices: summed.chunks_exact(c).map(argmax).collect(),
    })
}
