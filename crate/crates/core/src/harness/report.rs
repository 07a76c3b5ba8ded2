//! Comparison tables over one or more run outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, UcdError};

use super::metrics::{MetricsRecord, SUMMARY_HEADER};

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub step: usize,
    pub split: String,
    pub miou_old: Option<f64>,
    pub miou_new: Option<f64>,
    pub miou_all: Option<f64>,
}

fn parse_metric(s: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("nan") || s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| UcdError::Format(format!("bad metric {s:?}")))
}

pub fn parse_summary_csv(text: &str) -> Result<Vec<SummaryRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(SUMMARY_HEADER) {
        return Err(UcdError::Format(format!("expected header {SUMMARY_HEADER:?}")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(UcdError::Format(format!("bad row {l:?}")));
            }
            Ok(SummaryRow {
                method: f[0].to_string(),
                step: f[1]
                    .parse()
                    .map_err(|_| UcdError::Format(format!("bad step in {l:?}")))?,
                split: f[2].to_string(),
                miou_old: parse_metric(f[3])?,
                miou_new: parse_metric(f[4])?,
                miou_all: parse_metric(f[5])?,
            })
        })
        .collect()
}

pub fn parse_metrics_jsonl(text: &str) -> Result<Vec<SummaryRow>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r: MetricsRecord = serde_json::from_str(l)?;
            Ok(SummaryRow {
                method: r.method,
                step: r.step,
                split: r.split,
                miou_old: r.miou_old,
                miou_new: r.miou_new,
                miou_all: r.miou_all,
            })
        })
        .collect()
}

/// Reads a `summary.csv` or `metrics.jsonl`, or the `summary.csv` inside a
/// run directory.
pub fn load_rows(path: &Path) -> Result<Vec<SummaryRow>> {
    let file = if path.is_dir() {
        path.join("summary.csv")
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file)?;
    match file.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => parse_metrics_jsonl(&text),
        _ => parse_summary_csv(&text),
    }
}

#[derive(Default)]
struct Acc {
    n: usize,
    sums: [f64; 3],
    counts: [usize; 3],
}

impl Acc {
    fn push(&mut self, r: &SummaryRow) {
        self.n += 1;
        for (i, v) in [r.miou_old, r.miou_new, r.miou_all].into_iter().enumerate() {
            if let Some(v) = v {
                self.sums[i] += v;
                self.counts[i] += 1;
            }
        }
    }

    fn mean(&self, i: usize) -> Option<f64> {
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }
}

/// Rows are grouped by `(method, step, split)` and averaged across inputs
/// (e.g. seeds). With `average_steps` the step is folded into the group too.
pub fn compare_rows(rows: &[SummaryRow], average_steps: bool) -> String {
    let mut groups: BTreeMap<(String, Option<usize>, String), Acc> = BTreeMap::new();
    for r in rows {
        let step = (!average_steps).then_some(r.step);
        groups
            .entry((r.method.clone(), step, r.split.clone()))
            .or_default()
            .push(r);
    }
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>5} {:<6} {:>4} {:>8} {:>8} {:>8}",
        "method", "step", "split", "n", "old", "new", "all"
    );
    for ((method, step, split), acc) in &groups {
        let step = step.map_or_else(|| "avg".to_string(), |s| s.to_string());
        let _ = writeln!(
            out,
            "{:<10} {:>5} {:<6} {:>4} {:>8} {:>8} {:>8}",
            method,
            step,
            split,
            acc.n,
            cell(acc.mean(0)),
            cell(acc.mean(1)),
            cell(acc.mean(2))
        );
    }
    out
}

pub fn compare_report<P: AsRef<Path>>(paths: &[P], average_steps: bool) -> Result<String> {
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(load_rows(p.as_ref())?);
    }
    Ok(compare_rows(&rows, average_steps))
}
