//! Report artifacts: training curves, confusion heatmaps, the accuracy
//! comparison chart and the summary tables.
//!
//! SVG output is written by hand with fixed float formatting, so identical
//! inputs always give identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::csv_field;
use crate::error::{Error, Result};
use crate::head::TrainHistory;
use crate::metrics::{ConfusionMatrix, MetricsReport};

const CHART_W: f64 = 640.0;
const CHART_H: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 56.0;
const TRAIN_COLOR: &str = "#1f77b4";
const VAL_COLOR: &str = "#ff7f0e";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Lower and upper axis bounds with a little padding; flat series get a
/// unit-wide band.
fn value_range(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    values: &'a [f64],
}

fn line_chart(title: &str, y_label: &str, series: &[Series]) -> String {
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let (y_lo, y_hi) = value_range(series.iter().flat_map(|s| s.values.iter().copied()));
    let plot_w = CHART_W - MARGIN_L - MARGIN_R;
    let plot_h = CHART_H - MARGIN_T - MARGIN_B;
    let x_at = |epoch: usize| {
        if n <= 1 {
            MARGIN_L + plot_w / 2.0
        } else {
            MARGIN_L + (epoch - 1) as f64 / (n - 1) as f64 * plot_w
        }
    };
    let y_at = |v: f64| MARGIN_T + (y_hi - v) / (y_hi - y_lo) * plot_h;

    let mut svg = svg_open(CHART_W, CHART_H);
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        CHART_W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        "<rect x=\"{MARGIN_L:.2}\" y=\"{MARGIN_T:.2}\" width=\"{plot_w:.2}\" height=\"{plot_h:.2}\" fill=\"none\" stroke=\"#999\"/>"
    );
    for i in 0..=4 {
        let v = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let y = y_at(v);
        let _ = writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{MARGIN_L:.2}\" y2=\"{y:.2}\" stroke=\"#999\"/><text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.3}</text>",
            MARGIN_L - 4.0,
            MARGIN_L - 6.0,
            y + 4.0
        );
    }
    let ticks: Vec<usize> = if n <= 10 {
        (1..=n).collect()
    } else {
        let step = n.div_ceil(10);
        (1..=n).filter(|e| (e - 1) % step == 0 || *e == n).collect()
    };
    let base = MARGIN_T + plot_h;
    for e in ticks {
        let x = x_at(e);
        let _ = writeln!(
            svg,
            "<line x1=\"{x:.2}\" y1=\"{base:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#999\"/><text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{e}</text>",
            base + 4.0,
            base + 18.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">Epoch</text>",
        MARGIN_L + plot_w / 2.0,
        CHART_H - 14.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}</text>",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        escape(y_label)
    );
    for s in series {
        let points: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x_at(i + 1), y_at(v)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline class=\"series\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>",
            s.color,
            points.join(" ")
        );
        if s.values.len() == 1 {
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>",
                x_at(1),
                y_at(s.values[0]),
                s.color
            );
        }
    }
    for (i, s) in series.iter().enumerate() {
        let x = CHART_W - MARGIN_R - 150.0;
        let y = MARGIN_T + 16.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{x:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{}\" stroke-width=\"2\"/><text x=\"{:.2}\" y=\"{:.2}\">{}</text>",
            x + 20.0,
            s.color,
            x + 26.0,
            y + 4.0,
            escape(s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Loss chart and accuracy chart, each with a training and a validation line.
pub fn render_history(history: &TrainHistory, model: &str) -> Result<(String, String)> {
    if history.is_empty() {
        return Err(Error::InvalidInput(format!("empty training history for {model}")));
    }
    let pct = |v: &[f64]| v.iter().map(|a| a * 100.0).collect::<Vec<_>>();
    let (train_acc, val_acc) = (pct(&history.train_acc), pct(&history.val_acc));
    let loss = line_chart(
        &format!("{model}: training and validation loss"),
        "Loss",
        &[
            Series { label: "Training loss", color: TRAIN_COLOR, values: &history.train_loss },
            Series { label: "Validation loss", color: VAL_COLOR, values: &history.val_loss },
        ],
    );
    let acc = line_chart(
        &format!("{model}: training and validation accuracy"),
        "Accuracy (%)",
        &[
            Series { label: "Training accuracy", color: TRAIN_COLOR, values: &train_acc },
            Series { label: "Validation accuracy", color: VAL_COLOR, values: &val_acc },
        ],
    );
    Ok((loss, acc))
}

/// Heatmap with the count printed in every cell.
pub fn render_confusion(cm: &ConfusionMatrix, classes: &[String], title: &str) -> Result<String> {
    let c = cm.num_classes();
    if c == 0 {
        return Err(Error::InvalidInput("confusion matrix has no classes".into()));
    }
    if classes.len() != c {
        return Err(Error::Shape(format!("{} class names for a {c}-class matrix", classes.len())));
    }
    let cell = (320.0 / c as f64).clamp(48.0, 120.0);
    let (left, top) = (110.0, 60.0);
    let w = left + cell * c as f64 + 30.0;
    let h = top + cell * c as f64 + 60.0;
    let max = (0..c).flat_map(|t| (0..c).map(move |p| (t, p))).map(|(t, p)| cm.get(t, p)).max().unwrap_or(0);

    let mut svg = svg_open(w, h);
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        w / 2.0,
        escape(title)
    );
    for t in 0..c {
        for p in 0..c {
            let count = cm.get(t, p);
            let shade = if max == 0 { 0.0 } else { count as f64 / max as f64 };
            let r = (247.0 - shade * (247.0 - 8.0)).round() as u8;
            let g = (251.0 - shade * (251.0 - 69.0)).round() as u8;
            let b = (255.0 - shade * (255.0 - 148.0)).round() as u8;
            let (x, y) = (left + cell * p as f64, top + cell * t as f64);
            let ink = if shade > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                svg,
                "<rect class=\"cell\" x=\"{x:.2}\" y=\"{y:.2}\" width=\"{cell:.2}\" height=\"{cell:.2}\" fill=\"#{r:02x}{g:02x}{b:02x}\" stroke=\"#666\"/><text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" fill=\"{ink}\" font-size=\"16\">{count}</text>",
                x + cell / 2.0,
                y + cell / 2.0 + 6.0
            );
        }
    }
    for (i, name) in classes.iter().enumerate() {
        let mid = cell * i as f64 + cell / 2.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            left - 6.0,
            top + mid + 4.0,
            escape(name)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            left + mid,
            top + cell * c as f64 + 18.0,
            escape(name)
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">Predicted</text>",
        left + cell * c as f64 / 2.0,
        h - 14.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">True</text>",
        top + cell * c as f64 / 2.0,
        top + cell * c as f64 / 2.0
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Bar chart of test accuracy, bars in the given order.
pub fn render_comparison(entries: &[(String, f64)]) -> Result<String> {
    if entries.is_empty() {
        return Err(Error::InvalidInput("no models to compare".into()));
    }
    let slot = 56.0;
    let plot_w = slot * entries.len() as f64;
    let (left, top, plot_h, bottom) = (56.0, 40.0, 260.0, 130.0);
    let w = left + plot_w + 20.0;
    let h = top + plot_h + bottom;
    let base = top + plot_h;

    let mut svg = svg_open(w, h);
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">Test accuracy by model</text>",
        w / 2.0
    );
    for i in 0..=5 {
        let v = 20.0 * i as f64;
        let y = base - v / 100.0 * plot_h;
        let _ = writeln!(
            svg,
            "<line x1=\"{left:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ddd\"/><text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.0}</text>",
            left + plot_w,
            left - 6.0,
            y + 4.0
        );
    }
    for (i, (name, acc)) in entries.iter().enumerate() {
        let bar_h = acc.clamp(0.0, 100.0) / 100.0 * plot_h;
        let x = left + slot * i as f64 + 8.0;
        let cx = x + (slot - 16.0) / 2.0;
        let _ = writeln!(
            svg,
            "<rect class=\"bar\" x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{bar_h:.2}\" fill=\"{TRAIN_COLOR}\"/><text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"10\">{acc:.2}</text>",
            base - bar_h,
            slot - 16.0,
            base - bar_h - 4.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"end\" transform=\"rotate(-45 {cx:.2} {:.2})\">{}</text>",
            base + 14.0,
            base + 14.0,
            escape(name)
        );
    }
    let _ = writeln!(
        svg,
        "<line x1=\"{left:.2}\" y1=\"{base:.2}\" x2=\"{:.2}\" y2=\"{base:.2}\" stroke=\"black\"/>",
        left + plot_w
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// One row of the overall-performance grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRow {
    pub model: String,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
}

/// One row of the sensitivity/specificity grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningRow {
    pub model: String,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub performance: Vec<PerformanceRow>,
    pub screening: Vec<ScreeningRow>,
}

const PERFORMANCE_HEADER: &str =
    "model,macro_precision,macro_recall,macro_f1,weighted_precision,weighted_recall,weighted_f1,accuracy";
const SCREENING_HEADER: &str = "model,sensitivity,specificity,accuracy";

fn opt2(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

fn opt2_md(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "n/a".into())
}

impl Report {
    /// Collects the summary grids, one row per entry in the given order.
    pub fn new(results: &[MetricsReport]) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::InvalidInput("report needs at least one evaluated model".into()));
        }
        let performance = results
            .iter()
            .map(|r| PerformanceRow {
                model: r.model.clone(),
                macro_precision: r.macro_avg.precision,
                macro_recall: r.macro_avg.recall,
                macro_f1: r.macro_avg.f1,
                weighted_precision: r.weighted_avg.precision,
                weighted_recall: r.weighted_avg.recall,
                weighted_f1: r.weighted_avg.f1,
                accuracy: r.accuracy,
            })
            .collect();
        let screening = results
            .iter()
            .map(|r| ScreeningRow {
                model: r.model.clone(),
                sensitivity: r.sensitivity,
                specificity: r.specificity,
                accuracy: r.accuracy,
            })
            .collect();
        Ok(Self { performance, screening })
    }

    pub fn performance_csv(&self) -> String {
        let mut out = format!("{PERFORMANCE_HEADER}\n");
        for r in &self.performance {
            let _ = writeln!(
                out,
                "{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}",
                csv_field(&r.model),
                r.macro_precision,
                r.macro_recall,
                r.macro_f1,
                r.weighted_precision,
                r.weighted_recall,
                r.weighted_f1,
                r.accuracy
            );
        }
        out
    }

    pub fn screening_csv(&self) -> String {
        let mut out = format!("{SCREENING_HEADER}\n");
        for r in &self.screening {
            let _ = writeln!(
                out,
                "{},{},{},{:.2}",
                csv_field(&r.model),
                opt2(r.sensitivity),
                opt2(r.specificity),
                r.accuracy
            );
        }
        out
    }

    pub fn to_markdown(&self, positive_class: &str) -> String {
        let mut out = String::from("# Results\n\n## Overall performance\n\n");
        out.push_str("| Model | Macro precision | Macro recall | Macro F1 | Weighted precision | Weighted recall | Weighted F1 | Accuracy |\n");
        out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
        for r in &self.performance {
            let _ = writeln!(
                out,
                "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |",
                r.model,
                r.macro_precision,
                r.macro_recall,
                r.macro_f1,
                r.weighted_precision,
                r.weighted_recall,
                r.weighted_f1,
                r.accuracy
            );
        }
        let _ = write!(
            out,
            "\n## Screening performance (positive class: {positive_class})\n\n| Model | Sensitivity | Specificity | Accuracy |\n|---|---:|---:|---:|\n"
        );
        for r in &self.screening {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {:.2} |",
                r.model,
                opt2_md(r.sensitivity),
                opt2_md(r.specificity),
                r.accuracy
            );
        }
        out.push_str("\nAll values are percentages.\n");
        out
    }

    pub fn read_performance_csv(path: &Path) -> Result<Vec<PerformanceRow>> {
        read_rows(path)
    }

    pub fn read_screening_csv(path: &Path) -> Result<Vec<ScreeningRow>> {
        read_rows(path)
    }
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::csv(path, e))
}

/// Writes `report.md`, `table6.csv`, `table7.csv`, `report.json` and
/// `comparison.svg` into `dir`.
pub fn emit_report(dir: &Path, results: &[MetricsReport], positive_class: &str) -> Result<Report> {
    let report = Report::new(results)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries: Vec<(String, f64)> = results.iter().map(|r| (r.model.clone(), r.accuracy)).collect();
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::json(dir.join("report.json"), e))?;
    let files = [
        ("report.md", report.to_markdown(positive_class)),
        ("table6.csv", report.performance_csv()),
        ("table7.csv", report.screening_csv()),
        ("report.json", json + "\n"),
        ("comparison.svg", render_comparison(&entries)?),
    ];
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}
