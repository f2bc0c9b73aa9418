//! Transfer reports as CSV, JSON and fixed-width text tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use aetransfer_core::attack::AttackKind;
use aetransfer_core::metrics::{Asr, Percent, TransferReport};
use serde::{Deserialize, Serialize};

use crate::store::{write_atomic, StoreError};

pub const CSV_HEADER: [&str; 9] = ["source", "target", "transform", "block_size", "attack", "N", "N_c", "acc", "asr"];

/// Marker for cells whose adversarial batch is missing.
pub const ABSENT: &str = "—";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Table,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Csv, Format::Json, Format::Table];

    pub fn file_name(self) -> &'static str {
        match self {
            Format::Csv => "report.csv",
            Format::Json => "report.json",
            Format::Table => "report.txt",
        }
    }
}

/// One CSV line. Absent cells leave `N`, `N_c`, `acc` and `asr` empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvRow {
    pub source: String,
    pub target: String,
    /// Target transform, `plain` for unencrypted targets.
    pub transform: String,
    pub block_size: Option<usize>,
    pub attack: String,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[serde(rename = "N_c")]
    pub n_c: Option<usize>,
    pub acc: String,
    pub asr: String,
}

pub fn rows(report: &TransferReport) -> Vec<CsvRow> {
    report
        .cells
        .iter()
        .map(|c| CsvRow {
            source: c.source.name.clone(),
            target: c.target.name.clone(),
            transform: c.target.transform.map_or("plain".into(), |t| t.to_string()),
            block_size: c.target.block_size,
            attack: c.attack.to_string(),
            n: c.metrics.as_ref().map(|m| m.n),
            n_c: c.metrics.as_ref().map(|m| m.n_c),
            acc: c.metrics.as_ref().map_or(String::new(), |m| m.acc.to_string()),
            asr: c.metrics.as_ref().map_or(String::new(), |m| m.asr.to_string()),
        })
        .collect()
}

pub fn to_csv(report: &TransferReport) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for row in rows(report) {
        w.serialize(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, csv::Error> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unexpected header {header:?}"),
        )));
    }
    r.deserialize().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonPercent {
    pub num: u64,
    pub den: u64,
    pub percent: String,
}

impl From<Percent> for JsonPercent {
    fn from(p: Percent) -> Self {
        JsonPercent {
            num: p.num,
            den: p.den,
            percent: p.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonCell {
    pub source: String,
    pub target: String,
    pub transform: Option<String>,
    pub block_size: Option<usize>,
    pub attack: String,
    /// `None` when the adversarial batch was missing.
    pub n: Option<usize>,
    pub n_c: Option<usize>,
    pub acc: Option<JsonPercent>,
    /// `None` when absent or undefined (`n_c == 0`).
    pub asr: Option<JsonPercent>,
}

pub fn to_json(report: &TransferReport) -> String {
    let cells: Vec<JsonCell> = report
        .cells
        .iter()
        .map(|c| JsonCell {
            source: c.source.name.clone(),
            target: c.target.name.clone(),
            transform: c.target.transform.map(|t| t.to_string()),
            block_size: c.target.block_size,
            attack: c.attack.to_string(),
            n: c.metrics.as_ref().map(|m| m.n),
            n_c: c.metrics.as_ref().map(|m| m.n_c),
            acc: c.metrics.as_ref().map(|m| m.acc.into()),
            asr: c.metrics.as_ref().and_then(|m| m.asr.percent()).map(Into::into),
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({ "cells": cells })).expect("report serializes") + "\n"
}

fn unique<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// One Acc block and one ASR block per source; rows are targets and columns
/// attacks, in first-appearance order.
pub fn to_table(report: &TransferReport) -> String {
    let sources = unique(report.cells.iter().map(|c| c.source.name.clone()));
    let mut out = String::new();
    for s in &sources {
        let cells: Vec<_> = report.cells.iter().filter(|c| &c.source.name == s).collect();
        let targets = unique(cells.iter().map(|c| c.target.name.clone()));
        let attacks: Vec<AttackKind> = unique(cells.iter().map(|c| c.attack));
        let width = targets.iter().map(|t| t.len()).max().unwrap_or(0).max(6);
        for (title, pick) in [
            ("Acc (%)", (|m: &aetransfer_core::metrics::CellMetrics| m.acc.to_string()) as fn(&_) -> String),
            ("ASR (%)", |m| match m.asr {
                Asr::Defined(p) => p.to_string(),
                Asr::Undefined => "undef".into(),
            }),
        ] {
            let _ = writeln!(out, "Source: {s}  {title}");
            let _ = write!(out, "{:<width$}", "Target");
            for a in &attacks {
                let _ = write!(out, "  {:>8}", a.as_str());
            }
            out.push('\n');
            for t in &targets {
                let _ = write!(out, "{t:<width$}");
                for a in &attacks {
                    let v = cells
                        .iter()
                        .find(|c| &c.target.name == t && c.attack == *a)
                        .and_then(|c| c.metrics.as_ref())
                        .map_or(ABSENT.to_string(), pick);
                    let _ = write!(out, "  {v:>8}");
                }
                out.push('\n');
            }
            out.push('\n');
        }
    }
    out
}

pub fn render(report: &TransferReport, format: Format) -> String {
    match format {
        Format::Csv => to_csv(report),
        Format::Json => to_json(report),
        Format::Table => to_table(report),
    }
}

/// Writes the report in each requested format into `dir`; returns the paths.
pub fn emit_report(report: &TransferReport, formats: &[Format], dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    formats
        .iter()
        .map(|&f| {
            let p = dir.join(f.file_name());
            write_atomic(&p, render(report, f).as_bytes())?;
            Ok(p)
        })
        .collect()
}
