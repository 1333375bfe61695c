//! Variant comparison tables: CSV for people, JSON for tools.

use std::fs;
use std::path::Path;

use langssl_core::eval::ReportRow;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_FILE: &str = "report.csv";
pub const JSON_FILE: &str = "report.json";

pub const CSV_HEADER: [&str; 6] = [
    "variant",
    "params_increase_pct",
    "lang_probe_acc",
    "frame_probe_macro",
    "final_contrastive",
    "codebook_perplexity",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub tap_layer: usize,
    pub corpus_fingerprint: u64,
    pub rows: Vec<ReportRow>,
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory csv");
    for r in rows {
        w.write_record([
            r.variant.tag().to_string(),
            r.params_increase_pct.to_string(),
            r.lang_probe_acc.to_string(),
            r.frame_probe_macro.to_string(),
            r.final_contrastive.to_string(),
            r.codebook_perplexity.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

/// Fixed-width table for the terminal.
pub fn to_table(rows: &[ReportRow]) -> String {
    let mut s = format!(
        "{:<6} {:>10} {:>10} {:>10} {:>12} {:>10}\n",
        "model", "params+%", "lang acc", "frame acc", "contrastive", "perplexity"
    );
    for r in rows {
        s += &format!(
            "{:<6} {:>10.4} {:>10.4} {:>10.4} {:>12.4} {:>10.2}\n",
            r.variant.label(),
            r.params_increase_pct,
            r.lang_probe_acc,
            r.frame_probe_macro,
            r.final_contrastive,
            r.codebook_perplexity
        );
    }
    s
}

pub fn write_report(dir: &Path, summary: &ReportSummary) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let csv_path = dir.join(CSV_FILE);
    fs::write(&csv_path, to_csv(&summary.rows)).map_err(Error::io(&csv_path))?;
    let json_path = dir.join(JSON_FILE);
    let json = serde_json::to_string_pretty(summary).expect("report serializes");
    fs::write(&json_path, json + "\n").map_err(Error::io(&json_path))
}
