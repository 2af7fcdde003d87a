use serde::{Deserialize, Serialize};

use super::config::ModelKind;
use super::HarnessError;
use crate::dataset::FilterReport;
use crate::metrics::MetricReport;

pub const METRIC_COLUMNS: [&str; 7] = ["AUC", "F1", "RMSE", "Acc", "Bal Acc", "Precision", "Recall"];

const PLACEHOLDER: &str = "—";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub kind: ModelKind,
    pub family: String,
    pub model: String,
    /// Metrics, or the reason the model produced none.
    pub outcome: Result<MetricReport, String>,
    pub seconds: f64,
    /// Training stopped at the budget.
    pub truncated: bool,
}

impl ResultRow {
    pub fn metric_values(&self) -> Option<[f64; 7]> {
        self.outcome.as_ref().ok().map(|m| {
            [
                m.auc,
                m.f1,
                m.rmse,
                m.accuracy,
                m.balanced_accuracy,
                m.precision,
                m.recall,
            ]
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub dataset: String,
    pub seed: u64,
    pub config_hash: String,
    pub filter: Option<FilterReport>,
    pub rows: Vec<ResultRow>,
    pub log: Vec<String>,
}

impl ResultsTable {
    pub fn failed_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.is_err()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

pub fn emit_table(t: &ResultsTable, format: TableFormat) -> String {
    match format {
        TableFormat::Markdown => markdown(t),
        TableFormat::Csv => csv_text(t),
    }
}

fn markdown(t: &ResultsTable) -> String {
    let mut out = format!("Results for {} dataset\n\n", t.dataset);
    out += &format!("| Family | Model | {} |\n", METRIC_COLUMNS.join(" | "));
    out += &format!("|---|---|{}\n", "---:|".repeat(METRIC_COLUMNS.len()));
    let mut last_family = None;
    for row in &t.rows {
        let family = if last_family == Some(&row.family) {
            ""
        } else {
            &row.family
        };
        last_family = Some(&row.family);
        let cells: Vec<String> = match row.metric_values() {
            Some(v) => v
                .iter()
                .map(|x| {
                    if x.is_finite() {
                        format!("{x:.2}")
                    } else {
                        PLACEHOLDER.into()
                    }
                })
                .collect(),
            None => vec![PLACEHOLDER.into(); METRIC_COLUMNS.len()],
        };
        out += &format!("| {family} | {} | {} |\n", row.model, cells.join(" | "));
    }
    out
}

const CSV_HEADER: [&str; 13] = [
    "family",
    "model",
    "auc",
    "f1",
    "rmse",
    "accuracy",
    "balanced_accuracy",
    "precision",
    "recall",
    "n_points",
    "failures",
    "seconds",
    "error",
];

fn csv_text(t: &ResultsTable) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for row in &t.rows {
        let mut rec = vec![row.family.clone(), row.model.clone()];
        match &row.outcome {
            Ok(m) => {
                rec.extend(row.metric_values().unwrap().iter().map(|x| x.to_string()));
                rec.push(m.n_points.to_string());
                rec.push(m.failure_count.to_string());
            }
            Err(_) => rec.extend(std::iter::repeat_n(String::new(), 9)),
        }
        rec.push(row.seconds.to_string());
        rec.push(row.outcome.as_ref().err().cloned().unwrap_or_default());
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// One parsed csv line.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub family: String,
    pub model: String,
    pub values: Option<[f64; 7]>,
    pub error: Option<String>,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, HarnessError> {
    let bad = |e: String| HarnessError::Data(format!("results csv: {e}"));
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let values = if rec[2].is_empty() {
            None
        } else {
            let mut v = [0.0; 7];
            for (i, slot) in v.iter_mut().enumerate() {
                *slot = rec[2 + i].parse().map_err(|e| bad(format!("{e}")))?;
            }
            Some(v)
        };
        rows.push(CsvRow {
            family: rec[0].to_string(),
            model: rec[1].to_string(),
            values,
            error: Some(rec[12].to_string()).filter(|s| !s.is_empty()),
        });
    }
    Ok(rows)
}
