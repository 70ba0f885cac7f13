//! Rendering score tables and dataset statistics.
//!
//! Accuracy cells are percentages with two decimals in `mean±sem` form,
//! e.g. `44.24±0.23`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetStats;
use crate::judge::{ScoreCell, ScoreTable};
use crate::taxonomy::{ErrorType, MemoryCategory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Markdown,
    Csv,
    JsonLines,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            "json-lines" | "jsonl" => Ok(ReportFormat::JsonLines),
            other => Err(format!("unknown format '{other}' (markdown, csv, json-lines)")),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Markdown => "md",
            ReportFormat::Csv => "csv",
            ReportFormat::JsonLines => "jsonl",
        }
    }
}

/// `PerErrorType`: one row per model, category columns and an average per
/// error type. `MethodComparison` adds the strategy column and an overall
/// average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    PerErrorType,
    MethodComparison,
}

impl std::str::FromStr for Layout {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "errors" | "per-error-type" => Ok(Layout::PerErrorType),
            "methods" | "method-comparison" => Ok(Layout::MethodComparison),
            other => Err(format!("unknown layout '{other}' (errors, methods)")),
        }
    }
}

/// One scored run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub model: String,
    pub strategy: String,
    pub table: ScoreTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub format: ReportFormat,
    pub body: String,
    pub source_run_ids: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("EmptyInput: nothing to render")]
    EmptyInput,
    #[error("malformed report: {0}")]
    Malformed(String),
}

impl ReportError {
    pub fn name(&self) -> &'static str {
        match self {
            ReportError::EmptyInput => "EmptyInput",
            ReportError::Malformed(_) => "MalformedReport",
        }
    }
}

/// `mean±sem` as percentages with two decimals.
pub fn format_cell(mean: f64, sem: f64) -> String {
    format!("{:.2}±{:.2}", mean * 100.0, sem * 100.0)
}

/// Inverse of [`format_cell`]: fractions, at displayed precision.
pub fn parse_cell(text: &str) -> Option<(f64, f64)> {
    let (m, s) = text.trim().split_once('±')?;
    Some((m.trim().parse::<f64>().ok()? / 100.0, s.trim().parse::<f64>().ok()? / 100.0))
}

type Column = (String, Box<dyn Fn(&ScoreTable) -> &ScoreCell>);

fn columns(layout: Layout) -> Vec<Column> {
    let mut cols: Vec<Column> = Vec::new();
    for e in ErrorType::ALL {
        for c in MemoryCategory::ALL {
            cols.push((format!("{} {}", e.upper(), c.short()), Box::new(move |t| t.cell(e, c))));
        }
        cols.push((format!("{} Avg.", e.upper()), Box::new(move |t| t.average(e))));
    }
    if layout == Layout::MethodComparison {
        cols.push(("Avg.".to_string(), Box::new(|t| &t.overall)));
    }
    cols
}

fn key_headers(layout: Layout) -> Vec<&'static str> {
    match layout {
        Layout::PerErrorType => vec!["Model"],
        Layout::MethodComparison => vec!["Model", "Strategy"],
    }
}

fn keys(row: &ReportRow, layout: Layout) -> Vec<String> {
    match layout {
        Layout::PerErrorType => vec![row.model.clone()],
        Layout::MethodComparison => vec![row.model.clone(), row.strategy.clone()],
    }
}

/// Renders score rows (and optionally dataset statistics).
pub fn render(
    rows: &[ReportRow],
    stats: Option<&DatasetStats>,
    format: ReportFormat,
    layout: Layout,
) -> Result<ReportDoc, ReportError> {
    if rows.is_empty() && stats.is_none() {
        return Err(ReportError::EmptyInput);
    }
    let cols = columns(layout);
    let mut headers: Vec<String> = key_headers(layout).into_iter().map(String::from).collect();
    headers.extend(cols.iter().map(|(h, _)| h.clone()));
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut line = keys(r, layout);
            line.extend(cols.iter().map(|(_, get)| {
                let c = get(&r.table);
                format_cell(c.accuracy_mean, c.sem)
            }));
            line
        })
        .collect();

    let body = match format {
        ReportFormat::Markdown => {
            let mut out = String::new();
            if !rows.is_empty() {
                out.push_str(&markdown_table(&headers, &table));
            }
            if let Some(s) = stats {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&markdown_stats(s));
            }
            out
        }
        ReportFormat::Csv => {
            let mut out = String::new();
            if !rows.is_empty() {
                out.push_str(&csv_table(&headers, &table));
            }
            if let Some(s) = stats {
                if !out.is_empty() {
                    out.push('\n');
                }
                let (h, t) = stats_table(s);
                out.push_str(&csv_table(&h, &t));
            }
            out
        }
        ReportFormat::JsonLines => {
            let mut out = String::new();
            for (r, line) in rows.iter().zip(&table) {
                let cells: serde_json::Map<String, serde_json::Value> = cols
                    .iter()
                    .zip(&line[line.len() - cols.len()..])
                    .map(|((h, get), display)| {
                        let c = get(&r.table);
                        (
                            h.clone(),
                            serde_json::json!({
                                "mean": c.accuracy_mean,
                                "sem": c.sem,
                                "n": c.n,
                                "invalid": c.invalid,
                                "display": display,
                            }),
                        )
                    })
                    .collect();
                let obj = serde_json::json!({
                    "run_id": r.run_id,
                    "model": r.model,
                    "strategy": r.strategy,
                    "cells": cells,
                });
                writeln!(out, "{obj}").unwrap();
            }
            if let Some(s) = stats {
                writeln!(out, "{}", serde_json::json!({ "stats": s })).unwrap();
            }
            out
        }
    };
    Ok(ReportDoc {
        format,
        body,
        source_run_ids: rows.iter().map(|r| r.run_id.clone()).collect(),
    })
}

fn markdown_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    writeln!(out, "| {} |", headers.join(" | ")).unwrap();
    writeln!(out, "|{}|", headers.iter().map(|_| "---").collect::<Vec<_>>().join("|")).unwrap();
    for r in rows {
        writeln!(out, "| {} |", r.join(" | ")).unwrap();
    }
    out
}

fn csv_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(headers).unwrap();
    for r in rows {
        w.write_record(r).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

fn stats_table(s: &DatasetStats) -> (Vec<String>, Vec<Vec<String>>) {
    let mut headers = vec!["Category".to_string()];
    for e in ErrorType::ALL {
        headers.push(format!("{} Num.", e.upper()));
        headers.push(format!("{} Words", e.upper()));
    }
    headers.push("Total Num.".into());
    headers.push("Total Words".into());
    let fmt_words = |n: usize, w: f64| if n == 0 { "-".to_string() } else { format!("{w:.1}") };
    let mut rows = Vec::new();
    for c in MemoryCategory::ALL {
        let mut row = vec![c.label().to_string()];
        let mut n_total = 0;
        let mut w_total = 0.0;
        for e in ErrorType::ALL {
            let cell = s.cell(e, c);
            row.push(cell.sample_count.to_string());
            row.push(fmt_words(cell.sample_count, cell.mean_words));
            n_total += cell.sample_count;
            w_total += cell.mean_words * cell.sample_count as f64;
        }
        row.push(n_total.to_string());
        row.push(fmt_words(n_total, if n_total == 0 { 0.0 } else { w_total / n_total as f64 }));
        rows.push(row);
    }
    let mut total = vec!["Total".to_string()];
    for e in ErrorType::ALL {
        let cell = s.total(e);
        total.push(cell.sample_count.to_string());
        total.push(fmt_words(cell.sample_count, cell.mean_words));
    }
    total.push(s.overall.sample_count.to_string());
    total.push(fmt_words(s.overall.sample_count, s.overall.mean_words));
    rows.push(total);
    (headers, rows)
}

/// Dataset statistics as a markdown table: sample counts and mean words per
/// query for each category and error type.
pub fn markdown_stats(s: &DatasetStats) -> String {
    let (h, t) = stats_table(s);
    markdown_table(&h, &t)
}

/// A score row read back from CSV output.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRow {
    pub keys: Vec<String>,
    /// `(column header, mean, sem)` as fractions.
    pub cells: Vec<(String, f64, f64)>,
}

/// Reads the score table at the top of a CSV report (stops at the first
/// blank line).
pub fn parse_csv(body: &str) -> Result<Vec<ParsedRow>, ReportError> {
    let first_block = body.split("\n\n").next().unwrap_or("");
    let mut reader = csv::Reader::from_reader(first_block.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| ReportError::Malformed(e.to_string()))?
        .clone();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| ReportError::Malformed(e.to_string()))?;
        let mut keys = Vec::new();
        let mut cells = Vec::new();
        for (h, v) in headers.iter().zip(record.iter()) {
            match parse_cell(v) {
                Some((m, s)) => cells.push((h.to_string(), m, s)),
                None => keys.push(v.to_string()),
            }
        }
        out.push(ParsedRow { keys, cells });
    }
    Ok(out)
}

/// Reads the score table out of a markdown report.
pub fn parse_markdown(body: &str) -> Result<Vec<ParsedRow>, ReportError> {
    let mut lines = body.lines().take_while(|l| l.starts_with('|'));
    let split = |l: &str| -> Vec<String> { l.trim().trim_matches('|').split('|').map(|c| c.trim().to_string()).collect() };
    let headers = split(lines.next().ok_or_else(|| ReportError::Malformed("no header".into()))?);
    lines.next();
    Ok(lines
        .map(|l| {
            let mut keys = Vec::new();
            let mut cells = Vec::new();
            for (h, v) in headers.iter().zip(split(l)) {
                match parse_cell(&v) {
                    Some((m, s)) => cells.push((h.clone(), m, s)),
                    None => keys.push(v),
                }
            }
            ParsedRow { keys, cells }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_format() {
        assert_eq!(format_cell(0.4424, 0.0023), "44.24±0.23");
        assert_eq!(format_cell(1.0, 0.0), "100.00±0.00");
        assert_eq!(parse_cell("44.24±0.23"), Some((0.4424, 0.0023)));
    }

    #[test]
    fn empty_input() {
        assert!(matches!(
            render(&[], None, ReportFormat::Markdown, Layout::PerErrorType),
            Err(ReportError::EmptyInput)
        ));
    }
}
