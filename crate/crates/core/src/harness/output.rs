//! Summary emission.
//!
//! CSV schema (header exactly):
//! `model,combiner,n,d,trials,bias,mse_vs_mle,se_mse_vs_mle,mse_vs_true,se_mse_vs_true,predicted_mse_vs_mle`
//!
//! Floats print as Rust's shortest round-trip decimals; undefined cells
//! (single-trial standard errors, predictions without a closed form) are
//! `NaN` in CSV and `null` in JSON. Rows are sorted by (model, combiner, n).

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::aggregate::SummaryRow;
use crate::harness::run::TrialRecord;

pub const SUMMARY_HEADER: &str =
    "model,combiner,n,d,trials,bias,mse_vs_mle,se_mse_vs_mle,mse_vs_true,se_mse_vs_true,predicted_mse_vs_mle";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::InvalidConfig(format!("unknown format '{other}'"))),
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "NaN".to_string(),
    }
}

fn sorted(summary: &[SummaryRow]) -> Vec<&SummaryRow> {
    let mut rows: Vec<&SummaryRow> = summary.iter().collect();
    rows.sort_by(|a, b| {
        (a.model.as_str(), a.combiner.as_str(), a.n, a.d).cmp(&(
            b.model.as_str(),
            b.combiner.as_str(),
            b.n,
            b.d,
        ))
    });
    rows
}

/// Render the summary table in the requested format.
pub fn render_summary(summary: &[SummaryRow], format: OutputFormat) -> String {
    let rows = sorted(summary);
    match format {
        OutputFormat::Csv => {
            let mut out = String::from(SUMMARY_HEADER);
            out.push('\n');
            for r in rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{}\n",
                    r.model,
                    r.combiner.as_str(),
                    r.n,
                    r.d,
                    r.trials,
                    r.bias_scalar(),
                    r.mse_vs_mle,
                    fmt_opt(r.se_mse_vs_mle),
                    r.mse_vs_true,
                    fmt_opt(r.se_mse_vs_true),
                    fmt_opt(r.predicted_mse_vs_mle),
                ));
            }
            out
        }
        OutputFormat::Json => {
            let values: Vec<serde_json::Value> = rows
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "model": r.model,
                        "combiner": r.combiner.as_str(),
                        "n": r.n,
                        "d": r.d,
                        "trials": r.trials,
                        "bias": r.bias_scalar(),
                        "mse_vs_mle": r.mse_vs_mle,
                        "se_mse_vs_mle": r.se_mse_vs_mle,
                        "mse_vs_true": r.mse_vs_true,
                        "se_mse_vs_true": r.se_mse_vs_true,
                        "predicted_mse_vs_mle": r.predicted_mse_vs_mle,
                    })
                })
                .collect();
            let mut out = serde_json::to_string_pretty(&values).expect("JSON of plain numbers");
            out.push('\n');
            out
        }
    }
}

/// Write the summary to `path`, cross-checking the per-cell trial counts
/// against the records that produced it.
pub fn write_results(
    summary: &[SummaryRow],
    records: &[TrialRecord],
    path: &Path,
    format: OutputFormat,
) -> Result<()> {
    for row in summary {
        let count = records
            .iter()
            .filter(|r| {
                r.flag.is_none()
                    && r.model == row.model
                    && r.combiner == row.combiner
                    && r.n == row.n
                    && r.d == row.d
            })
            .count();
        if count != row.trials {
            return Err(Error::InvalidConfig(format!(
                "summary row ({}, {}, n={}) claims {} trials but {} records match",
                row.model,
                row.combiner.as_str(),
                row.n,
                row.trials,
                count
            )));
        }
    }
    std::fs::write(path, render_summary(summary, format))?;
    Ok(())
}
