use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{round_tenth, RoundMetrics, StageCell, StageMetrics};
use crate::digest::canonical_json;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("incomplete run: no metrics")]
    IncompleteRun,
    #[error("malformed metrics csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

pub fn render(metrics: &StageMetrics, format: ReportFormat, label: &str) -> Result<String, ReportError> {
    if metrics.is_empty() {
        return Err(ReportError::IncompleteRun);
    }
    Ok(match format {
        ReportFormat::Markdown => render_markdown(metrics, label),
        ReportFormat::Csv => render_csv(metrics),
        ReportFormat::Json => canonical_json(metrics).expect("metrics serialize"),
    })
}

fn ordinal(n: u32) -> String {
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

/// Signed one-decimal delta between two accuracies, e.g. `(+3.1)`.
pub fn delta_note(now: f64, before: f64) -> String {
    let d = round_tenth(now) - round_tenth(before);
    let d = round_tenth(d);
    if d < 0.0 {
        format!("({d:.1})")
    } else {
        format!("(+{:.1})", d.abs())
    }
}

fn pct(cell: &StageCell) -> String {
    format!("{:.1}", cell.rounded())
}

/// The deltas shown next to each stage: regenerate against the previous
/// stage's answers, reflect against the rejected answers, and the overall
/// accuracy against the first regeneration.
fn deltas(metrics: &StageMetrics) -> Vec<(String, u32, StageCell, Option<String>)> {
    let mut rows = vec![("cot_infer".to_string(), 0, metrics.cot_infer, None)];
    let mut previous = metrics.cot_infer;
    for r in &metrics.rounds {
        let regen_delta = (r.round == 1).then(|| delta_note(r.regenerate.accuracy_pct, previous.accuracy_pct));
        rows.push(("regenerate".into(), r.round, r.regenerate, regen_delta));
        rows.push(("select".into(), r.round, r.select, None));
        rows.push(("reject".into(), r.round, r.reject, None));
        if let Some(reflect) = r.reflect {
            rows.push(("reflect".into(), r.round, reflect, Some(delta_note(reflect.accuracy_pct, r.reject.accuracy_pct))));
        }
        previous = r.regenerate;
    }
    let all_delta = metrics.first_round().map(|r| delta_note(metrics.all.accuracy_pct, r.regenerate.accuracy_pct));
    rows.push(("all".into(), 0, metrics.all, all_delta));
    rows
}

pub fn render_markdown(metrics: &StageMetrics, label: &str) -> String {
    let mut header = vec!["Anchor".to_string(), "CoT Infer".to_string()];
    let mut cells = vec![label.to_string(), pct(&metrics.cot_infer)];
    let rows = deltas(metrics);
    for (stage, round, cell, delta) in rows.iter().skip(1) {
        let name = match stage.as_str() {
            "regenerate" => format!("{} Regenerate with Summary", ordinal(*round)),
            "select" => format!("{} Refine Select", ordinal(*round)),
            "reject" => format!("{} Refine Reject", ordinal(*round)),
            "reflect" => format!("{} Reflect Reject", ordinal(*round)),
            _ => "All".to_string(),
        };
        header.push(name);
        let mut text = pct(cell);
        if matches!(stage.as_str(), "select" | "reject") {
            text.push_str(&format!(" (n={})", cell.count));
        }
        if let Some(d) = delta {
            text.push(' ');
            text.push_str(d);
        }
        cells.push(text);
    }
    let mut out = String::new();
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|{}\n", " --- |".repeat(header.len())));
    out.push_str(&format!("| {} |\n", cells.join(" | ")));
    out.push_str(&format!("\nSamples: {}.\n", metrics.all.count));
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    stage: String,
    round: u32,
    count: u64,
    accuracy_pct: f64,
    delta: String,
}

pub fn render_csv(metrics: &StageMetrics) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (stage, round, cell, delta) in deltas(metrics) {
        w.serialize(CsvRow { stage, round, count: cell.count, accuracy_pct: cell.accuracy_pct, delta: delta.unwrap_or_default() })
            .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

pub fn parse_csv(text: &str) -> Result<StageMetrics, ReportError> {
    let bad = |m: String| ReportError::Csv(m);
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut cot = None;
    let mut all = None;
    let mut rounds: Vec<RoundMetrics> = Vec::new();
    for row in r.deserialize::<CsvRow>() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let cell = StageCell::new(row.count, row.accuracy_pct);
        match row.stage.as_str() {
            "cot_infer" => cot = Some(cell),
            "all" => all = Some(cell),
            "regenerate" => rounds.push(RoundMetrics {
                round: row.round,
                regenerate: cell,
                select: StageCell::new(0, 0.0),
                reject: StageCell::new(0, 0.0),
                reflect: None,
            }),
            stage => {
                let current = rounds
                    .last_mut()
                    .filter(|r| r.round == row.round)
                    .ok_or_else(|| bad(format!("`{stage}` row for round {} before its regenerate row", row.round)))?;
                match stage {
                    "select" => current.select = cell,
                    "reject" => current.reject = cell,
                    "reflect" => current.reflect = Some(cell),
                    other => return Err(bad(format!("unknown stage `{other}`"))),
                }
            }
        }
    }
    Ok(StageMetrics {
        cot_infer: cot.ok_or_else(|| bad("missing cot_infer row".into()))?,
        rounds,
        all: all.ok_or_else(|| bad("missing all row".into()))?,
    })
}
