//! Confusion matrices and the derived classification metrics.
//!
//! Every metric is reported on the 0-100 scale. Ratios with a zero
//! denominator evaluate to 0 and mark the class as degenerate.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::csv_field;
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_predictions(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} true labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut counts = vec![0u64; num_classes * num_classes];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::InvalidInput(format!(
                    "label pair ({t}, {p}) out of range for {num_classes} classes"
                )));
            }
            counts[t * num_classes + p] += 1;
        }
        Ok(Self { num_classes, counts })
    }

    /// From row-major counts.
    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::Shape(format!(
                "{num_classes}x{num_classes} confusion matrix needs {} counts, got {}",
                num_classes * num_classes,
                counts.len()
            )));
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|c| self.get(c, c)).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, class)).sum()
    }

    /// One-vs-rest (tp, fp, fn, tn) for `class`.
    pub fn one_vs_rest(&self, class: usize) -> (u64, u64, u64, u64) {
        let tp = self.get(class, class);
        let fp = self.predicted(class) - tp;
        let fn_ = self.support(class) - tp;
        let tn = self.total() - tp - fp - fn_;
        (tp, fp, fn_, tn)
    }

    /// CSV with class-name headers; the corner cell is `true\pred`.
    pub fn write_csv(&self, path: &Path, classes: &[String]) -> Result<()> {
        if classes.len() != self.num_classes {
            return Err(Error::Shape(format!(
                "{} class names for a {}-class matrix",
                classes.len(),
                self.num_classes
            )));
        }
        let mut out = String::from("true\\pred");
        for name in classes {
            out.push(',');
            out.push_str(&csv_field(name));
        }
        out.push('\n');
        for (t, name) in classes.iter().enumerate() {
            out.push_str(&csv_field(name));
            for p in 0..self.num_classes {
                out.push_str(&format!(",{}", self.get(t, p)));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn percent(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64 * 100.0)
}

/// Trace over total, as a percentage.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    percent(cm.trace(), cm.total())
        .ok_or_else(|| Error::InvalidInput("accuracy of an empty confusion matrix".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub support: u64,
    /// Some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

/// One-vs-rest precision, recall, F1 and specificity for `class`.
pub fn precision_recall_f1_specificity(cm: &ConfusionMatrix, class: usize) -> ClassMetrics {
    let (tp, fp, fn_, tn) = cm.one_vs_rest(class);
    let precision = percent(tp, tp + fp);
    let recall = percent(tp, tp + fn_);
    let specificity = percent(tn, fp + tn);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    ClassMetrics {
        class,
        tp,
        fp,
        fn_,
        tn,
        precision: precision.unwrap_or(0.0),
        recall: recall.unwrap_or(0.0),
        f1: f1.unwrap_or(0.0),
        specificity: specificity.unwrap_or(0.0),
        support: tp + fn_,
        degenerate: precision.is_none() || recall.is_none() || specificity.is_none(),
    }
}

/// Unweighted mean.
pub fn macro_average(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("macro average of no classes".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Support-weighted mean.
pub fn weighted_average(values: &[f64], supports: &[u64]) -> Result<f64> {
    if values.len() != supports.len() {
        return Err(Error::Shape(format!(
            "{} values but {} supports",
            values.len(),
            supports.len()
        )));
    }
    let total: u64 = supports.iter().sum();
    if total == 0 {
        return Err(Error::InvalidInput("weighted average with zero total support".into()));
    }
    Ok(values.iter().zip(supports).map(|(v, &s)| v * s as f64).sum::<f64>() / total as f64)
}

/// (sensitivity, specificity) of a binary matrix: the recall of the
/// positive class and the recall of the other class.
pub fn sensitivity_specificity(cm: &ConfusionMatrix, positive: usize) -> Result<(f64, f64)> {
    if cm.num_classes() != 2 {
        return Err(Error::InvalidInput(format!(
            "sensitivity/specificity need a binary matrix, got {} classes",
            cm.num_classes()
        )));
    }
    if positive > 1 {
        return Err(Error::InvalidInput(format!("positive class {positive} out of range")));
    }
    let negative = 1 - positive;
    let sensitivity = precision_recall_f1_specificity(cm, positive).recall;
    let specificity = precision_recall_f1_specificity(cm, negative).recall;
    Ok((sensitivity, specificity))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub classes: Vec<String>,
    pub samples: u64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub positive_class: Option<String>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    /// Full report for one model. Sensitivity and specificity are filled in
    /// for binary tasks whose class list contains `positive_class`.
    pub fn compute(model: &str, cm: &ConfusionMatrix, classes: &[String], positive_class: &str) -> Result<Self> {
        if classes.len() != cm.num_classes() {
            return Err(Error::Shape(format!(
                "{} class names for a {}-class matrix",
                classes.len(),
                cm.num_classes()
            )));
        }
        let per_class: Vec<ClassMetrics> = (0..cm.num_classes())
            .map(|c| precision_recall_f1_specificity(cm, c))
            .collect();
        let supports: Vec<u64> = per_class.iter().map(|m| m.support).collect();
        let column = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).collect::<Vec<_>>();
        let (precision, recall, f1) = (column(|m| m.precision), column(|m| m.recall), column(|m| m.f1));
        let macro_avg = Averages {
            precision: macro_average(&precision)?,
            recall: macro_average(&recall)?,
            f1: macro_average(&f1)?,
        };
        let tp_sum: u64 = per_class.iter().map(|m| m.tp).sum();
        let weighted_avg = Averages {
            precision: weighted_average(&precision, &supports)?,
            recall: percent(tp_sum, cm.total()).unwrap_or(0.0),
            f1: weighted_average(&f1, &supports)?,
        };
        let positive = classes.iter().position(|c| c == positive_class);
        let (sensitivity, specificity) = match positive {
            Some(p) if cm.num_classes() == 2 => {
                let (se, sp) = sensitivity_specificity(cm, p)?;
                (Some(se), Some(sp))
            }
            _ => (None, None),
        };
        Ok(Self {
            model: model.to_string(),
            classes: classes.to_vec(),
            samples: cm.total(),
            accuracy: accuracy(cm)?,
            per_class,
            macro_avg,
            weighted_avg,
            positive_class: positive.map(|_| positive_class.to_string()),
            sensitivity,
            specificity,
            confusion: cm.clone(),
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Per-class markdown table followed by the averaged rows.
    pub fn to_markdown(&self) -> String {
        let mut out = format!("### {}\n\n", self.model);
        out.push_str("| Class | Precision | Recall | F1-score | Specificity | Support |\n");
        out.push_str("|---|---:|---:|---:|---:|---:|\n");
        for m in &self.per_class {
            out.push_str(&format!(
                "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {} |\n",
                self.classes[m.class], m.precision, m.recall, m.f1, m.specificity, m.support
            ));
        }
        for (label, a) in [("Macro avg", &self.macro_avg), ("Weighted avg", &self.weighted_avg)] {
            out.push_str(&format!(
                "| {label} | {:.2} | {:.2} | {:.2} | | {} |\n",
                a.precision, a.recall, a.f1, self.samples
            ));
        }
        out.push_str(&format!("\nAccuracy: {:.2}%\n", self.accuracy));
        out
    }
}
