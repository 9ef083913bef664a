//! Metrics records, their JSONL persistence, and ablation / delta tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::mean_std;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Accuracy,
    SpanF1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub run_id: String,
    /// `A`, `B`, `C`, `D`, `baseline`, `classic-ST`, ...
    pub stage: String,
    /// Free-form descriptors such as `loss`, `input`, `upon`.
    #[serde(default)]
    pub variant: BTreeMap<String, String>,
    #[serde(default)]
    pub labeled_size: Option<usize>,
    pub metric: MetricName,
    pub value: f64,
    pub seed: u64,
    /// Omitted in deterministic runs so reruns serialize identically.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.value) {
            return Err(Error::data(format!(
                "metric value {} of run {} outside [0, 1]",
                self.value, self.run_id
            )));
        }
        Ok(())
    }

    pub fn with_variant(mut self, key: &str, value: impl Into<String>) -> Self {
        self.variant.insert(key.into(), value.into());
        self
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Rejects a set holding two records with the same run id and metric.
pub fn check_unique(records: &[MetricsRecord]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        if !seen.insert((&r.run_id, r.metric)) {
            return Err(Error::data(format!("duplicate record for run {} / {:?}", r.run_id, r.metric)));
        }
    }
    Ok(())
}

pub fn append_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        r.validate()?;
        writeln!(f, "{}", r.to_json_line()?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn parse_jsonl(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let r: MetricsRecord = serde_json::from_str(l)
                .map_err(|e| Error::data(format!("metrics line {}: {e}", n + 1)))?;
            r.validate()?;
            Ok(r)
        })
        .collect()
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    parse_jsonl(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Conjunction of optional equality tests on a record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Selector {
    pub stage: Option<String>,
    pub variant: BTreeMap<String, String>,
    pub labeled_size: Option<usize>,
    pub metric: Option<MetricName>,
}

impl Selector {
    pub fn stage(stage: &str) -> Self {
        Self {
            stage: Some(stage.into()),
            ..Self::default()
        }
    }

    pub fn with(mut self, key: &str, value: &str) -> Self {
        self.variant.insert(key.into(), value.into());
        self
    }

    pub fn matches(&self, r: &MetricsRecord) -> bool {
        self.stage.as_ref().map_or(true, |s| *s == r.stage)
            && self.labeled_size.map_or(true, |n| r.labeled_size == Some(n))
            && self.metric.map_or(true, |m| m == r.metric)
            && self.variant.iter().all(|(k, v)| r.variant.get(k) == Some(v))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub title: String,
    pub select: Selector,
}

impl Axis {
    pub fn new(title: impl Into<String>, select: Selector) -> Self {
        Self {
            title: title.into(),
            select,
        }
    }
}

/// Values of the records matching both a row and a column, ordered by seed
/// so the result does not depend on record order.
pub fn cell_values(records: &[MetricsRecord], row: &Axis, col: &Axis) -> Vec<f64> {
    let mut hits: Vec<(u64, &str, f64)> = records
        .iter()
        .filter(|r| row.select.matches(r) && col.select.matches(r))
        .map(|r| (r.seed, r.run_id.as_str(), r.value))
        .collect();
    hits.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    hits.into_iter().map(|h| h.2).collect()
}

fn header(out: &mut String, corner: &str, cols: &[Axis]) {
    let _ = write!(out, "| {corner} |");
    for c in cols {
        let _ = write!(out, " {} |", c.title);
    }
    out.push_str("\n|---|");
    for _ in cols {
        out.push_str("---|");
    }
    out.push('\n');
}

fn line(out: &mut String, title: &str, cells: &[String]) {
    let _ = write!(out, "| {title} |");
    for c in cells {
        let _ = write!(out, " {c} |");
    }
    out.push('\n');
}

const MISSING: &str = "—";

/// Markdown table of mean values in percent with one decimal; missing cells
/// show `—` and rows without any data are left out. With `show_std` each
/// cell also carries the cross-seed standard deviation.
pub fn render_ablation_table(records: &[MetricsRecord], rows: &[Axis], cols: &[Axis], show_std: bool) -> String {
    let mut out = String::new();
    header(&mut out, "Method", cols);
    for row in rows {
        let cells: Vec<Vec<f64>> = cols.iter().map(|c| cell_values(records, row, c)).collect();
        if cells.iter().all(Vec::is_empty) {
            continue;
        }
        let text: Vec<String> = cells
            .iter()
            .map(|v| {
                if v.is_empty() {
                    return MISSING.to_string();
                }
                let (m, s) = mean_std(v);
                if show_std {
                    format!("{:.1} ± {:.1}", m * 100.0, s * 100.0)
                } else {
                    format!("{:.1}", m * 100.0)
                }
            })
            .collect();
        line(&mut out, &row.title, &text);
    }
    out
}

/// `+1.2%` style difference in percentage points, never `-0.0%`.
pub fn format_delta(delta_points: f64) -> String {
    let s = format!("{delta_points:+.1}%");
    if s == "-0.0%" {
        "+0.0%".into()
    } else {
        s
    }
}

/// Rows as signed differences from the mean of `baseline` in each column.
pub fn render_delta_table(records: &[MetricsRecord], baseline: &Axis, rows: &[Axis], cols: &[Axis]) -> Result<String> {
    let base: Vec<f64> = cols
        .iter()
        .map(|c| {
            let v = cell_values(records, baseline, c);
            if v.is_empty() {
                Err(Error::data(format!("baseline {:?} has no value for column {:?}", baseline.title, c.title)))
            } else {
                Ok(mean_std(&v).0)
            }
        })
        .collect::<Result<_>>()?;
    let mut out = String::new();
    header(&mut out, "Method", cols);
    line(&mut out, &baseline.title, &vec![MISSING.to_string(); cols.len()]);
    for row in rows {
        let text: Vec<String> = cols
            .iter()
            .zip(&base)
            .map(|(c, &b)| {
                let v = cell_values(records, row, c);
                if v.is_empty() {
                    MISSING.to_string()
                } else {
                    format_delta((mean_std(&v).0 - b) * 100.0)
                }
            })
            .collect();
        line(&mut out, &row.title, &text);
    }
    Ok(out)
}
