//! Binary classification metrics over indexed records versus ground truth.
//!
//! Existence is scored per component over all images; state tasks are scored
//! as binary problems with one designated positive label. Macro averages are
//! unweighted means over targets. Undefined ratios (zero denominators) are
//! reported as 0.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::ImageResult;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground truth line {line}: {message}")]
    Truth { line: usize, message: String },
    #[error("no ground truth for {} image(s): {}", .0.len(), .0.join(", "))]
    MissingTruth(Vec<String>),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("nothing to average")]
    NoRows,
    #[error("no scorable images for target {0}")]
    NothingScored(String),
    #[error("report line {line}: {message}")]
    Report { line: usize, message: String },
    #[error("i/o error reading ground truth: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TruthEntry {
    pub image_id: String,
    #[serde(default)]
    pub present: BTreeMap<String, bool>,
    #[serde(default)]
    pub states: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth {
    entries: HashMap<String, TruthEntry>,
    order: Vec<String>,
}

impl GroundTruth {
    pub fn from_entries(entries: impl IntoIterator<Item = TruthEntry>) -> Self {
        let mut gt = Self::default();
        for e in entries {
            gt.insert(e);
        }
        gt
    }

    pub fn insert(&mut self, entry: TruthEntry) {
        if !self.entries.contains_key(&entry.image_id) {
            self.order.push(entry.image_id.clone());
        }
        self.entries.insert(entry.image_id.clone(), entry);
    }

    /// Reads `{"image_id", "present": {...}, "states": {...}}` lines.
    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, EvalError> {
        let mut gt = Self::default();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TruthEntry = serde_json::from_str(&line).map_err(|e| EvalError::Truth {
                line: n + 1,
                message: e.to_string(),
            })?;
            if gt.entries.contains_key(&entry.image_id) {
                return Err(EvalError::Truth {
                    line: n + 1,
                    message: format!("duplicate image_id {}", entry.image_id),
                });
            }
            gt.insert(entry);
        }
        Ok(gt)
    }

    pub fn get(&self, image_id: &str) -> Option<&TruthEntry> {
        self.entries.get(image_id)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &TruthEntry> {
        self.order.iter().map(|id| &self.entries[id])
    }
}

/// What a confusion matrix is computed for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Existence(String),
    /// State task on `component`; positive means the component exists in
    /// state `positive`.
    State { component: String, positive: String },
}

impl Target {
    pub fn name(&self) -> String {
        match self {
            Target::Existence(c) => c.clone(),
            Target::State { component, positive } => format!("{component}={positive}"),
        }
    }

    fn predicted(&self, result: &ImageResult) -> bool {
        match self {
            Target::Existence(c) => result.record(c).is_some_and(|r| r.exists()),
            Target::State { component, positive } => result
                .record(component)
                .is_some_and(|r| r.exists() && r.state == *positive),
        }
    }

    fn actual(&self, truth: &TruthEntry) -> Option<bool> {
        match self {
            Target::Existence(c) => truth.present.get(c).copied(),
            Target::State { component, positive } => match truth.states.get(component) {
                Some(label) => Some(label == positive),
                None => match truth.present.get(component) {
                    Some(false) => Some(false),
                    _ => None,
                },
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// True when precision or recall had a zero denominator.
    pub fn has_zero_division(&self) -> bool {
        self.tp + self.fp == 0 || self.tp + self.fn_ == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricsRow {
    pub fn new(accuracy: f64, precision: f64, recall: f64, f1: f64) -> Self {
        Self {
            accuracy,
            precision,
            recall,
            f1,
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Coverage {
    /// Fail when a scored image has no ground truth.
    #[default]
    Strict,
    /// Exclude such images and count them.
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Scored {
    pub matrix: ConfusionMatrix,
    /// Images left out: failed during indexing, or not covered by the truth in lenient mode.
    pub excluded: usize,
}

pub fn confusion_counts(
    results: &[ImageResult],
    truth: &GroundTruth,
    target: &Target,
    coverage: Coverage,
) -> Result<Scored, EvalError> {
    let mut scored = Scored::default();
    let mut missing = Vec::new();
    for result in results {
        if result.is_failed() {
            scored.excluded += 1;
            continue;
        }
        let actual = truth.get(&result.image_id).and_then(|t| target.actual(t));
        match actual {
            Some(actual) => scored.matrix.add(target.predicted(result), actual),
            None => {
                scored.excluded += 1;
                missing.push(result.image_id.clone());
            }
        }
    }
    if coverage == Coverage::Strict && !missing.is_empty() {
        return Err(EvalError::MissingTruth(missing));
    }
    Ok(scored)
}

pub fn binary_metrics(m: &ConfusionMatrix) -> Result<MetricsRow, EvalError> {
    let total = m.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(m.tp, m.tp + m.fp);
    let recall = ratio(m.tp, m.tp + m.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricsRow {
        accuracy: ratio(m.tp + m.tn, total),
        precision,
        recall,
        f1,
    })
}

pub fn macro_average(rows: &[MetricsRow]) -> Result<MetricsRow, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::NoRows);
    }
    let n = rows.len() as f64;
    let mut sums = [0.0; 4];
    for r in rows {
        for (s, v) in sums.iter_mut().zip(r.values()) {
            *s += v;
        }
    }
    Ok(MetricsRow::new(sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n))
}

/// One line of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMetrics {
    pub name: String,
    pub metrics: MetricsRow,
    /// Absent for fixture rows that carry only published metrics.
    pub matrix: Option<ConfusionMatrix>,
    pub excluded: usize,
}

impl TargetMetrics {
    pub fn from_metrics(name: impl Into<String>, metrics: MetricsRow) -> Self {
        Self {
            name: name.into(),
            metrics,
            matrix: None,
            excluded: 0,
        }
    }
}

/// Scores every target and returns one row per target.
pub fn evaluate(
    results: &[ImageResult],
    truth: &GroundTruth,
    targets: &[Target],
    coverage: Coverage,
) -> Result<Vec<TargetMetrics>, EvalError> {
    targets
        .iter()
        .map(|t| {
            let scored = confusion_counts(results, truth, t, coverage)?;
            let metrics = binary_metrics(&scored.matrix).map_err(|_| EvalError::NothingScored(t.name()))?;
            Ok(TargetMetrics {
                name: t.name(),
                metrics,
                matrix: Some(scored.matrix),
                excluded: scored.excluded,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Table,
}

pub const OVERALL: &str = "Overall";

/// Renders rows plus a macro-averaged `Overall` row, 4 decimal places.
pub fn report(rows: &[TargetMetrics], format: ReportFormat) -> String {
    let overall = macro_average(&rows.iter().map(|r| r.metrics).collect::<Vec<_>>()).ok();
    let flagged = |r: &TargetMetrics| r.matrix.is_some_and(|m| m.has_zero_division());
    let mut lines: Vec<(String, [f64; 4])> = rows
        .iter()
        .map(|r| {
            let name = if flagged(r) { format!("{}*", r.name) } else { r.name.clone() };
            (name, r.metrics.values())
        })
        .collect();
    if let Some(o) = overall {
        lines.push((OVERALL.to_string(), o.values()));
    }
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str("target,accuracy,precision,recall,f1\n");
            for (name, v) in &lines {
                let _ = writeln!(out, "{name},{:.4},{:.4},{:.4},{:.4}", v[0], v[1], v[2], v[3]);
            }
        }
        ReportFormat::Table => {
            let width = lines.iter().map(|(n, _)| n.len()).chain([6]).max().unwrap_or(6);
            let _ = writeln!(
                out,
                "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}",
                "Target", "Accuracy", "Precision", "Recall", "F1"
            );
            for (i, (name, v)) in lines.iter().enumerate() {
                if overall.is_some() && i + 1 == lines.len() {
                    let _ = writeln!(out, "{}", "-".repeat(width + 44));
                }
                let _ = writeln!(
                    out,
                    "{name:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}",
                    v[0], v[1], v[2], v[3]
                );
            }
            if rows.iter().any(flagged) {
                out.push_str("* precision, recall or F1 undefined (zero denominator); reported as 0\n");
            }
        }
    }
    out
}

/// A parsed CSV report: per-target rows plus the `Overall` row if present.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport {
    pub rows: Vec<TargetMetrics>,
    pub overall: Option<MetricsRow>,
}

/// Reads the CSV produced by [`report`]. Zero-division markers on target
/// names are dropped.
pub fn read_report_csv(text: &str) -> Result<ParsedReport, EvalError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let bad = |line: usize, message: String| EvalError::Report { line: line + 1, message };
    match lines.next() {
        Some((_, h)) if h.trim() == "target,accuracy,precision,recall,f1" => {}
        Some((n, h)) => return Err(bad(n, format!("unexpected header {h:?}"))),
        None => return Err(bad(0, "empty report".into())),
    }
    let mut parsed = ParsedReport {
        rows: Vec::new(),
        overall: None,
    };
    for (n, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(bad(n, format!("expected 5 fields, found {}", fields.len())));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| bad(n, format!("not a number: {f:?}")))?;
        }
        let metrics = MetricsRow::new(v[0], v[1], v[2], v[3]);
        match fields[0].trim_end_matches('*') {
            OVERALL => parsed.overall = Some(metrics),
            name => parsed.rows.push(TargetMetrics::from_metrics(name, metrics)),
        }
    }
    Ok(parsed)
}
