//! Report artifacts written from a record file.

use std::path::{Path, PathBuf};

use thiserror::Error;

use promptseg_core::prompt_sim::EvalRecord;
use promptseg_core::stats::{aggregate_report, Report, StatsError};

use crate::evaluate::write_atomic;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const CURVES_CSV: &str = "step_curves.csv";
pub const SCATTER_CSV: &str = "area_scatter.csv";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no records to report on")]
    Empty,
    #[error(transparent)]
    Stats(StatsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn rows_to_csv(rows: &[Vec<String>]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

/// Aggregates `records` and writes JSON, Markdown and CSV artifacts to `dir`.
pub fn write_report(records: &[EvalRecord], dir: &Path) -> Result<Report, ReportError> {
    let report = match aggregate_report(records) {
        Ok(r) => r,
        Err(StatsError::Empty) => return Err(ReportError::Empty),
        Err(e) => return Err(ReportError::Stats(e)),
    };
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        write_atomic(&path, bytes).map_err(|source| ReportError::Io { path, source })
    };
    let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
    json.push(b'\n');
    write(REPORT_JSON, &json)?;
    write(REPORT_MD, report.to_markdown().as_bytes())?;
    write(CURVES_CSV, &rows_to_csv(&report.curve_rows())?)?;
    write(SCATTER_CSV, &rows_to_csv(&report.scatter_rows())?)?;
    Ok(report)
}
