// SPDX-License-Identifier: MIT OR Apache-2.0

//! Comparison tables and sweep plots from results streams.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use editlab_core::evalsuite::{CaseScores, MetricReport, TaskMetrics};
use editlab_core::factworld::Task;

use crate::config::{SweepAxis, BASE_ARM};
use crate::error::{RunError, RunResult};
use crate::pipeline::{to_json, write_file, ResultRecord};
use crate::plot::{line_plot, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Dp,
    Cap,
    Oap,
    Eos,
    Ams,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Dp, Metric::Cap, Metric::Oap, Metric::Eos, Metric::Ams];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dp => "DP",
            Metric::Cap => "CAP",
            Metric::Oap => "OAP",
            Metric::Eos => "EOS",
            Metric::Ams => "AMS",
        }
    }

    pub fn of(self, t: &TaskMetrics) -> Option<f64> {
        match self {
            Metric::Dp => Some(t.dp),
            Metric::Cap => Some(t.cap),
            Metric::Oap => t.oap,
            Metric::Eos => t.eos,
            Metric::Ams => t.ams,
        }
    }
}

/// Metrics of one (arm, sweep value, seed) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<SweepAxis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    pub seed: u64,
    pub report: MetricReport,
}

impl ReportRow {
    pub fn metric(&self, task: Task, m: Metric) -> Option<f64> {
        self.report.task(task).and_then(|t| m.of(t))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportArtifacts {
    pub reports: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
}

fn sweep_axis(records: &[ResultRecord]) -> RunResult<Option<SweepAxis>> {
    let mut axis = None;
    for r in records {
        match (axis, r.axis) {
            (_, None) => {}
            (None, a) => axis = a,
            (Some(a), Some(b)) if a != b => {
                return Err(RunError::Schema(format!("results mix sweep axes {} and {}", a.name(), b.name())));
            }
            _ => {}
        }
        if r.axis.is_some() != r.value.is_some() {
            return Err(RunError::Schema(format!("record {} of arm {} has an axis without a value", r.case.id, r.arm)));
        }
    }
    Ok(axis)
}

/// Groups records by (arm, value, seed): the base model first, then arms
/// and values in order of first appearance, seeds ascending.
pub fn report_rows(records: &[ResultRecord]) -> RunResult<Vec<ReportRow>> {
    sweep_axis(records)?;
    let mut arms: Vec<&str> = Vec::new();
    let mut values: Vec<(&str, Option<u64>)> = Vec::new();
    for r in records {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
        let v = (r.arm.as_str(), r.value.map(f64::to_bits));
        if !values.contains(&v) {
            values.push(v);
        }
    }
    arms.sort_by_key(|a| *a != BASE_ARM);
    let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut rows = Vec::new();
    for arm in arms {
        for &(_, value) in values.iter().filter(|(a, _)| *a == arm) {
            for &seed in &seeds {
                let group: Vec<&ResultRecord> = records
                    .iter()
                    .filter(|r| r.arm == arm && r.value.map(f64::to_bits) == value && r.seed == seed)
                    .collect();
                if group.is_empty() {
                    continue;
                }
                let cases: Vec<CaseScores> = group.iter().map(|r| r.case.clone()).collect();
                let report = MetricReport::from_scores(&cases, arm, seed).map_err(|e| RunError::Schema(e.to_string()))?;
                rows.push(ReportRow { arm: arm.into(), axis: group[0].axis, value: group[0].value, seed, report });
            }
        }
    }
    Ok(rows)
}

fn columns(rows: &[ReportRow]) -> Vec<(Task, Metric)> {
    let mut out = Vec::new();
    for task in Task::ALL {
        for m in Metric::ALL {
            if rows.iter().any(|r| r.metric(task, m).is_some()) {
                out.push((task, m));
            }
        }
    }
    out
}

fn render_table(s: &mut String, rows: &[ReportRow], cols: &[(Task, Metric)]) {
    let axis = rows.iter().find_map(|r| r.axis);
    let mut header = String::from("| method |");
    let mut rule = String::from("|---|");
    if let Some(a) = axis {
        let _ = write!(header, " {} |", a.name());
        rule.push_str("---|");
    }
    header.push_str(" seed | edits |");
    rule.push_str("---|---|");
    for (t, m) in cols {
        let _ = write!(header, " {t} {} |", m.name());
        rule.push_str("---|");
    }
    let _ = writeln!(s, "{header}\n{rule}");
    for r in rows {
        let _ = write!(s, "| {} |", r.arm);
        if axis.is_some() {
            let _ = write!(s, " {} |", r.value.map_or_else(|| "-".into(), |v| v.to_string()));
        }
        let _ = write!(s, " {} | {} |", r.seed, r.report.n_edits);
        for &(t, m) in cols {
            let _ = write!(s, " {} |", r.metric(t, m).map_or_else(|| "-".into(), |v| format!("{v:.2}")));
        }
        s.push('\n');
    }
}

/// Methods × tasks × metrics, one row per (arm, value, seed): a recall
/// table and an overfit table.
pub fn render_markdown(rows: &[ReportRow]) -> String {
    let cols = columns(rows);
    let mut s = String::from("# Results\n\nProbabilities and rates are percentages.\n");
    for (title, recall) in [("Edit recall", true), ("Editing overfit", false)] {
        let part: Vec<_> = cols.iter().copied().filter(|(t, _)| t.is_recall() == recall).collect();
        if part.is_empty() {
            continue;
        }
        let _ = writeln!(s, "\n## {title}\n");
        render_table(&mut s, rows, &part);
    }
    s
}

/// One plot per (task, metric): the seed mean of every swept arm against
/// the sweep value.
pub fn sweep_plots(rows: &[ReportRow]) -> Vec<(String, String)> {
    let Some(axis) = rows.iter().find_map(|r| r.axis) else {
        return Vec::new();
    };
    let mut arms: Vec<&str> = Vec::new();
    for r in rows.iter().filter(|r| r.value.is_some()) {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
    }
    let mut out = Vec::new();
    for (task, m) in columns(rows) {
        let mut series = Vec::new();
        for &arm in &arms {
            let mut points: Vec<(f64, f64)> = Vec::new();
            let mut values: Vec<f64> = rows.iter().filter(|r| r.arm == arm).filter_map(|r| r.value).collect();
            values.sort_by(f64::total_cmp);
            values.dedup();
            for v in values {
                let ys: Vec<f64> = rows.iter().filter(|r| r.arm == arm && r.value == Some(v)).filter_map(|r| r.metric(task, m)).collect();
                if !ys.is_empty() {
                    points.push((v, ys.iter().sum::<f64>() / ys.len() as f64));
                }
            }
            if !points.is_empty() {
                series.push(Series { label: arm.to_string(), points });
            }
        }
        if series.is_empty() {
            continue;
        }
        let svg = line_plot(&format!("{task} {}", m.name()), axis.name(), m.name(), &series, axis == SweepAxis::Epsilon);
        out.push((format!("{}_{}.svg", task.name(), m.name().to_lowercase()), svg));
    }
    out
}

/// Writes `report.md`, `report.json` and, for sweeps, `plots/*.svg` under `dir`.
pub fn write_report(records: &[ResultRecord], dir: &Path) -> RunResult<ReportArtifacts> {
    let rows = report_rows(records)?;
    let md = dir.join("report.md");
    let json = dir.join("report.json");
    write_file(&md, render_markdown(&rows))?;
    write_file(&json, to_json(&rows))?;
    let mut plots = Vec::new();
    for (name, svg) in sweep_plots(&rows) {
        let p = dir.join("plots").join(name);
        write_file(&p, svg)?;
        plots.push(p);
    }
    Ok(ReportArtifacts { reports: vec![md, json], plots })
}

pub fn read_results(path: &Path) -> RunResult<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| RunError::Schema(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Report over the concatenation of several results streams.
pub fn cmd_report(paths: &[PathBuf], out: &Path) -> RunResult<ReportArtifacts> {
    if paths.is_empty() {
        return Err(RunError::Schema("no results streams given".into()));
    }
    let mut records = Vec::new();
    for p in paths {
        records.extend(read_results(p)?);
    }
    write_report(&records, out)
}
