//! Comparison tables over run summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{FrzError, Result};
use crate::experiment::RunSummary;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub runs: usize,
    pub accuracy_mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub accuracy_std: f64,
    pub total_flops_mean: f64,
    pub saved_percent: f64,
}

/// Aggregates summaries by method. Savings are relative to the `full` row
/// when present, otherwise to the most expensive method.
pub fn report(summaries: &[RunSummary]) -> Result<Vec<ReportRow>> {
    let first = summaries.first().ok_or_else(|| FrzError::Report("no summaries given".into()))?;
    if let Some(s) = summaries.iter().find(|s| s.setup_digest != first.setup_digest) {
        return Err(FrzError::Report(format!(
            "summary for {} (seed {}) comes from a different task or network than {} (seed {})",
            s.method, s.seed, first.method, first.seed
        )));
    }
    let mut groups: BTreeMap<&str, Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries {
        groups.entry(&s.method).or_default().push(s);
    }
    let mut rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|(method, runs)| {
            let n = runs.len() as f64;
            let acc: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
            let mean = acc.iter().sum::<f64>() / n;
            let std = if runs.len() > 1 { (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            let flops = runs.iter().map(|r| r.total_flops as f64).sum::<f64>() / n;
            ReportRow { method: method.to_string(), runs: runs.len(), accuracy_mean: mean, accuracy_std: std, total_flops_mean: flops, saved_percent: 0.0 }
        })
        .collect();
    let baseline = rows
        .iter()
        .find(|r| r.method == "full")
        .or_else(|| rows.iter().max_by(|a, b| a.total_flops_mean.total_cmp(&b.total_flops_mean)))
        .map(|r| r.total_flops_mean)
        .unwrap();
    for r in &mut rows {
        r.saved_percent = if baseline > 0.0 { 100.0 * (1.0 - r.total_flops_mean / baseline) } else { 0.0 };
    }
    Ok(rows)
}

/// Fixed-width text table, accuracy in percent.
pub fn render(rows: &[ReportRow]) -> String {
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                format!("{:.2} ± {:.2}", 100.0 * r.accuracy_mean, 100.0 * r.accuracy_std),
                format!("{:.6}", r.total_flops_mean / 1e12),
                format!("{:.1}", r.saved_percent),
            ]
        })
        .collect();
    let head = ["method", "accuracy (%)", "TFLOPs", "saved (%)"];
    let mut width = head.map(|h| h.chars().count());
    for c in &cells {
        for (w, s) in width.iter_mut().zip(c) {
            *w = (*w).max(s.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, c: [&str; 4]| {
        let pad = |s: &str, w: usize| " ".repeat(w - s.chars().count());
        let _ = writeln!(
            out,
            "{}{}  {}{}  {}{}  {}{}",
            c[0],
            pad(c[0], width[0]),
            pad(c[1], width[1]),
            c[1],
            pad(c[2], width[2]),
            c[2],
            pad(c[3], width[3]),
            c[3]
        );
    };
    line(&mut out, head);
    for c in &cells {
        line(&mut out, [&c[0], &c[1], &c[2], &c[3]]);
    }
    out
}
