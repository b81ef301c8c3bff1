//! Table lines and the results CSV.

use std::fs::OpenOptions;
use std::path::Path;

use serde::Serialize;
use ssformers::episodes::EvalReport;

/// One row of `results.csv`; field order is the file's column order.
#[derive(Clone, Debug, Serialize)]
pub struct ResultRow {
    pub run_id: String,
    pub command: String,
    pub n_way: usize,
    pub m_shot: usize,
    pub b_query: usize,
    pub episodes: usize,
    pub variant: String,
    pub mean_acc: f64,
    pub ci95: f64,
    pub wall_seconds: f64,
}

pub const RESULTS_FILE: &str = "results.csv";

/// `"5-way 1-shot: 67.25±0.24"`, accuracies in percent.
pub fn accuracy_line(n_way: usize, m_shot: usize, report: &EvalReport) -> String {
    format!(
        "{n_way}-way {m_shot}-shot: {:.2}±{:.2}",
        100.0 * report.mean,
        100.0 * report.ci95
    )
}

/// Appends rows, writing the header only when the file is new or empty.
pub fn append_rows(dir: &Path, rows: &[ResultRow]) -> Result<(), csv::Error> {
    let path = dir.join(RESULTS_FILE);
    let fresh = std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(&path)?;
    let mut writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}
