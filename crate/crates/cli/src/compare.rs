//! Side-by-side comparison of finished runs and expert-usage counts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use moe_core::metrics::SelectionTable;
use moe_core::train::RunReport;

use crate::config::Regime;
use crate::error::CliError;
use crate::sweep::SweepSummary;

/// A report file as loaded: either a sweep summary (resolved to its
/// selected run) or a bare run report.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub name: String,
    pub regime: Regime,
    pub report: RunReport,
    /// Test-error spread over seeds, known only for sweep summaries.
    pub error_std: Option<f64>,
}

fn malformed(path: &Path, msg: impl ToString) -> CliError {
    CliError::Report {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

fn read_report(path: &Path) -> Result<RunReport, CliError> {
    let text = fs::read_to_string(path).map_err(|e| malformed(path, e))?;
    RunReport::from_json(&text).map_err(|e| malformed(path, e))
}

/// Load a `summary.json` or a run `report.json`.
pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let text = fs::read_to_string(path).map_err(|e| malformed(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(path, e))?;
    if value.get("selected").is_some() {
        let summary: SweepSummary = serde_json::from_value(value).map_err(|e| malformed(path, e))?;
        let run = summary
            .runs
            .get(summary.selected)
            .ok_or_else(|| malformed(path, "selected index out of range"))?;
        let base = path.parent().unwrap_or(Path::new("."));
        return Ok(Loaded {
            name: summary.name.clone(),
            regime: summary.kind,
            report: read_report(&base.join(&run.report))?,
            error_std: Some(summary.test_error_std),
        });
    }
    let report = RunReport::from_json(&text).map_err(|e| malformed(path, e))?;
    Ok(Loaded {
        name: path.display().to_string(),
        regime: Regime::infer(report.topology.map(|t| t.gate), report.config.reg.kind),
        report,
        error_std: None,
    })
}

/// One row of the comparison, test-set metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub name: String,
    pub regime: Regime,
    pub error: f64,
    pub error_std: Option<f64>,
    pub i_ey: f64,
    pub h_s: f64,
    pub h_u: f64,
}

impl From<&Loaded> for Row {
    fn from(l: &Loaded) -> Self {
        let t = &l.report.test;
        Row {
            name: l.name.clone(),
            regime: l.regime,
            error: t.error,
            error_std: l.error_std,
            i_ey: t.i_ey,
            h_s: t.h_s,
            h_u: t.h_u,
        }
    }
}

pub fn compare(paths: &[PathBuf]) -> Result<Vec<Row>, CliError> {
    if paths.len() < 2 {
        return Err(CliError::Usage("compare needs at least two reports".into()));
    }
    paths.iter().map(|p| load(p).map(|l| Row::from(&l))).collect()
}

fn fmt_error(r: &Row) -> String {
    match r.error_std {
        Some(s) => format!("{:.4} ± {:.4}", r.error, s),
        None => format!("{:.4}", r.error),
    }
}

/// Fixed-width text table: error, I(E;Y), H_s, H_u.
pub fn render_text(rows: &[Row]) -> String {
    let name_w = rows.iter().map(|r| r.name.chars().count()).max().unwrap_or(0).max(4);
    let regime_w = rows.iter().map(|r| r.regime.name().len()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<name_w$}  {:<regime_w$}  {:>17}  {:>7}  {:>7}  {:>7}",
        "name", "regime", "error", "I(E;Y)", "H_s", "H_u"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<name_w$}  {:<regime_w$}  {:>17}  {:>7.4}  {:>7.4}  {:>7.4}",
            r.name,
            r.regime.name(),
            fmt_error(r),
            r.i_ey,
            r.h_s,
            r.h_u
        );
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_csv(rows: &[Row]) -> String {
    let mut s = String::from("name,regime,error,error_std,i_ey,h_s,h_u\n");
    for r in rows {
        let std = r.error_std.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            csv_field(&r.name),
            r.regime.name(),
            r.error,
            std,
            r.i_ey,
            r.h_s,
            r.h_u
        );
    }
    s
}

/// Experts that receive at least `threshold` of all argmax-routed samples.
pub fn active_experts(table: &SelectionTable, threshold: f64) -> Result<usize, CliError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CliError::Usage(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let total = table.total() as f64;
    if total == 0.0 {
        return Ok(0);
    }
    Ok(table
        .row_sums()
        .iter()
        .filter(|&&c| c as f64 / total >= threshold)
        .count())
}

/// Active-expert count of a stored run, measured on its test routing.
pub fn expert_usage(path: &Path, threshold: f64) -> Result<usize, CliError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CliError::Usage(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    active_experts(&load(path)?.report.test.table, threshold)
}
