//! Report emission: JSON (lossless), CSV, and markdown tables with one row
//! per scenario.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::scenario::{ScenarioError, ScenarioReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "markdown",
        })
    }
}

pub fn render_csv(reports: &[ScenarioReport]) -> String {
    let mut out = String::from(
        "name,eval_ppl,targeted_total,targeted_phone,targeted_email,targeted_url,untargeted_good,k,lambda,seed\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{},{:.6},{},{},{},{},{},{},{},{}\n",
            r.name,
            r.eval_ppl,
            r.targeted_total,
            r.targeted_phone,
            r.targeted_email,
            r.targeted_url,
            r.untargeted_good,
            r.chosen_k,
            r.chosen_lambda,
            r.config.seed,
        ));
    }
    out
}

pub fn render_markdown(reports: &[ScenarioReport]) -> String {
    let mut out = String::from(
        "| Scenario | Eval PPL | Total | Phone | Email | URL | Good Recon |\n|---|---|---|---|---|---|---|\n",
    );
    for r in reports {
        out.push_str(&format!(
            "| {} | {:.2} | {} | {} | {} | {} | {} |\n",
            r.name,
            r.eval_ppl,
            r.targeted_total,
            r.targeted_phone,
            r.targeted_email,
            r.targeted_url,
            r.untargeted_good,
        ));
    }
    out
}

/// Writes the scenario reports to `path` in the chosen format.
pub fn emit_report(
    reports: &[ScenarioReport],
    format: ReportFormat,
    path: &Path,
) -> Result<(), ScenarioError> {
    let body = match format {
        ReportFormat::Json => serde_json::to_string_pretty(reports)?,
        ReportFormat::Csv => render_csv(reports),
        ReportFormat::Markdown => render_markdown(reports),
    };
    fs::write(path, body)?;
    Ok(())
}
