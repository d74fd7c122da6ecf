//! Plain-text training reports.
//!
//! `report.txt` holds `key = value` lines (metrics as `mae@80 = ...`);
//! `losses.csv` has one row per epoch.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use xdkd_core::harness::TrainReport;
use xdkd_core::metrics::MetricsReport;

use crate::error::{IoContext, Result};

pub fn metrics_lines(out: &mut String, m: &MetricsReport) {
    let cap = m.cap;
    writeln!(out, "count@{cap} = {}", m.count).unwrap();
    writeln!(out, "clamped@{cap} = {}", m.clamped).unwrap();
    for (name, v) in m.entries() {
        writeln!(out, "{name}@{cap} = {v}").unwrap();
    }
}

/// Aligned table with one column per cap.
pub fn metrics_table(metrics: &[MetricsReport]) -> String {
    let mut out = format!("{:<10}", "metric");
    for m in metrics {
        write!(out, "{:>12}", format!("cap {}", m.cap)).unwrap();
    }
    out.push('\n');
    let names = metrics.first().map(|m| m.entries().map(|(n, _)| n)).unwrap_or_default();
    for (i, name) in names.iter().enumerate() {
        write!(out, "{name:<10}").unwrap();
        for m in metrics {
            write!(out, "{:>12.4}", m.entries()[i].1).unwrap();
        }
        out.push('\n');
    }
    write!(out, "{:<10}", "pixels").unwrap();
    for m in metrics {
        write!(out, "{:>12}", m.count).unwrap();
    }
    out.push('\n');
    out
}

/// Everything except the wall time, which is the only field that varies
/// between identical runs.
pub fn render(report: &TrainReport) -> String {
    let mut out = String::new();
    writeln!(out, "epochs = {}", report.epochs.len()).unwrap();
    if let Some(last) = report.epochs.last() {
        writeln!(out, "final_depth = {}", last.depth).unwrap();
        writeln!(out, "final_xkd = {}", last.xkd).unwrap();
        writeln!(out, "final_d2kd = {}", last.d2kd).unwrap();
        writeln!(out, "final_total = {}", last.total).unwrap();
    }
    writeln!(out, "param_count = {}", report.param_count).unwrap();
    writeln!(out, "param_checksum = {:016x}", report.param_checksum).unwrap();
    if let Some((before, after)) = report.teacher_checksum {
        writeln!(out, "teacher_checksum_before = {before:016x}").unwrap();
        writeln!(out, "teacher_checksum_after = {after:016x}").unwrap();
    }
    for m in &report.metrics {
        metrics_lines(&mut out, m);
    }
    out
}

pub fn losses_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,depth,xkd,d2kd,total\n");
    for (i, e) in report.epochs.iter().enumerate() {
        writeln!(out, "{},{},{},{},{}", i + 1, e.depth, e.xkd, e.d2kd, e.total).unwrap();
    }
    out
}

pub fn write(report: &TrainReport, dir: &Path) -> Result<()> {
    let mut text = render(report);
    writeln!(text, "wall_time_secs = {:.3}", report.wall_time_secs).unwrap();
    let path = dir.join("report.txt");
    fs::write(&path, text).at(&path)?;
    let path = dir.join("losses.csv");
    fs::write(&path, losses_csv(report)).at(&path)
}

/// Parses `key = value` lines back, e.g. to read a metric from a run.
pub fn parse(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
