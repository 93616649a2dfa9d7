//! Collects evaluation reports into result tables.

use std::path::PathBuf;

use prism_core::student::EvalReport;

use crate::error::{CliError, Result};

pub struct Tables {
    pub csv: String,
    pub text: String,
}

/// Accuracy as percent with one decimal, e.g. `49.4±0.2`.
pub fn format_pm(mean: f64, std: f64) -> String {
    format!("{:.1}±{:.1}", 100.0 * mean, 100.0 * std)
}

pub fn collect_reports(pattern: &str) -> Result<Vec<(PathBuf, EvalReport)>> {
    let mut out = Vec::new();
    for entry in glob::glob(pattern)? {
        let path = entry.map_err(|e| CliError::Report(e.to_string()))?;
        let report: EvalReport = serde_json::from_slice(&std::fs::read(&path)?)
            .map_err(|e| CliError::Report(format!("{}: {e}", path.display())))?;
        out.push((path, report));
    }
    if out.is_empty() {
        return Err(CliError::Report(format!("no reports match {pattern}")));
    }
    Ok(out)
}

/// Rows keyed by (variant, ipc, k_max, policy), then config hash.
pub fn emit_results(reports: &[EvalReport]) -> Result<Tables> {
    let mut rows: Vec<&EvalReport> = reports.iter().collect();
    rows.sort_by(|a, b| {
        let key = |r: &EvalReport| {
            (
                r.meta.variant.clone(),
                r.meta.ipc,
                r.meta.k_max,
                r.meta.policy.clone(),
                r.meta.config_hash.clone(),
            )
        };
        key(a).cmp(&key(b))
    });

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "ipc", "k_max", "policy", "seeds", "mean", "std", "accuracy", "config_hash"])?;
    for r in &rows {
        w.write_record([
            r.meta.variant.clone(),
            r.meta.ipc.to_string(),
            r.meta.k_max.to_string(),
            r.meta.policy.clone(),
            r.seeds.len().to_string(),
            format!("{:.6}", r.mean),
            format!("{:.6}", r.std),
            format_pm(r.mean, r.std),
            r.meta.config_hash.clone(),
        ])?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| CliError::Report(e.to_string()))?)
        .expect("csv output is utf-8");

    let header = ["variant", "ipc", "k_max", "policy", "seeds", "top-1 (%)", "config"];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.meta.variant.clone(),
                r.meta.ipc.to_string(),
                r.meta.k_max.to_string(),
                r.meta.policy.clone(),
                r.seeds.len().to_string(),
                format_pm(r.mean, r.std),
                r.meta.config_hash.chars().take(12).collect(),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut text = line(header.to_vec());
    text += &line(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect());
    for row in &body {
        text += &line(row.iter().map(String::as_str).collect());
    }
    Ok(Tables { csv, text })
}
