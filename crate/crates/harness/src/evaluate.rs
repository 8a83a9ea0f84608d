//! Batch evaluation over the experiment grid with per-case checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use promptseg_core::backend::{build_backend, BackendError, Segmenter};
use promptseg_core::prompt_sim::{evaluate_prepared, prepare_case, EvalRecord, SessionError};

use crate::config::{ConfigError, ValidatedConfig};
use crate::manifest::{CaseEntry, ManifestError};

pub const RECORDS_JSONL: &str = "records.jsonl";
pub const RECORDS_CSV: &str = "records.csv";
pub const FAILURES_JSON: &str = "failures.json";
pub const RUN_MANIFEST_JSON: &str = "run_manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("backend failed its startup health check: {0}")]
    Health(BackendError),
    #[error("cannot build backend: {0}")]
    Backend(BackendError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("cannot build worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{} case(s) failed: {}", .0.len(), .0.iter().map(|c| format!("{} ({})", c.case_id, c.error)).collect::<Vec<_>>().join("; "))]
    CasesFailed(Vec<CaseFailure>),
}

#[derive(Debug, Error)]
enum CaseError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Session(#[from] SessionError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureTally {
    pub n_records: usize,
    pub n_failed_slices: usize,
    /// Failed slices per error message.
    pub by_error: BTreeMap<String, usize>,
    pub failed_cases: Vec<CaseFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub backend_id: String,
    pub backend_model: String,
    pub created_at: String,
    pub tool_version: String,
    pub n_cases: usize,
    pub n_records: usize,
    pub n_failed_slices: usize,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub n_records: usize,
    pub n_failed_slices: usize,
    pub evaluated_cases: usize,
    pub resumed_cases: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    config_hash: String,
    case_id: String,
    records: Vec<EvalRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EvaluateError + '_ {
    move |source| EvaluateError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a temporary file in the same directory and renames it into
/// place, so a killed run never leaves a half-written file under `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn checkpoint_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}.json"))
}

fn read_checkpoint(path: &Path, hash: &str, case_id: &str) -> Option<Vec<EvalRecord>> {
    let text = fs::read_to_string(path).ok()?;
    let cp: Checkpoint = serde_json::from_str(&text).ok()?;
    (cp.config_hash == hash && cp.case_id == case_id).then_some(cp.records)
}

fn evaluate_one_case(
    cfg: &ValidatedConfig,
    entry: &CaseEntry,
    backend: &dyn Segmenter,
) -> Result<Vec<EvalRecord>, CaseError> {
    let c = &cfg.config;
    let settings = c.settings();
    let case = entry.load(&cfg.dataset_root)?;
    let prepared = c
        .cropped
        .iter()
        .map(|&cropped| prepare_case(&case, cropped, &settings).map(|p| (cropped, p)))
        .collect::<Result<Vec<_>, _>>()?;
    // one unit per (crop, orientation); policies inside a unit run in order
    let units: Vec<_> = prepared
        .iter()
        .flat_map(|(cropped, p)| c.orientations.iter().map(move |&o| (*cropped, p, o)))
        .collect();
    let per_unit = units
        .par_iter()
        .map(|&(cropped, prepared, orientation)| {
            let mut out = Vec::new();
            for &policy in &c.policies {
                out.extend(evaluate_prepared(
                    &case,
                    prepared,
                    orientation,
                    policy,
                    cropped,
                    backend,
                    &settings,
                )?);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, SessionError>>()?;
    let mut records: Vec<EvalRecord> = per_unit.into_iter().flatten().collect();
    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(records)
}

/// Builds the configured backend and runs the startup health check.
pub fn connect_backend(
    cfg: &ValidatedConfig,
) -> Result<(Arc<dyn Segmenter>, String), EvaluateError> {
    let backend = build_backend(&cfg.config.backend).map_err(EvaluateError::Backend)?;
    let model = backend.health().map_err(EvaluateError::Health)?;
    Ok((backend, model))
}

/// Validates, connects and runs. The usual CLI entry point.
pub fn evaluate(
    cfg: &crate::config::ExperimentConfig,
    opts: &EvalOptions,
) -> Result<RunSummary, EvaluateError> {
    let cfg = cfg.validate()?;
    let (backend, model) = connect_backend(&cfg)?;
    run_evaluation(&cfg, backend, &model, opts)
}

pub fn run_evaluation(
    cfg: &ValidatedConfig,
    backend: Arc<dyn Segmenter>,
    model: &str,
    opts: &EvalOptions,
) -> Result<RunSummary, EvaluateError> {
    let c = &cfg.config;
    let out = &c.output_dir;
    let cp_dir = out.join(CHECKPOINT_DIR);
    if !opts.resume && cp_dir.exists() {
        fs::remove_dir_all(&cp_dir).map_err(io_err(&cp_dir))?;
    }
    fs::create_dir_all(&cp_dir).map_err(io_err(&cp_dir))?;
    let hash = c.content_hash();

    let mut done: BTreeMap<&str, Vec<EvalRecord>> = BTreeMap::new();
    if opts.resume {
        for entry in &cfg.manifest.cases {
            if let Some(r) = read_checkpoint(&checkpoint_path(&cp_dir, &entry.id), &hash, &entry.id)
            {
                done.insert(&entry.id, r);
            }
        }
    }
    let resumed_cases = done.len();
    let todo: Vec<&CaseEntry> = cfg
        .manifest
        .cases
        .iter()
        .filter(|e| !done.contains_key(e.id.as_str()))
        .collect();
    tracing::info!(cases = todo.len(), resumed = resumed_cases, "evaluating");

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(c.parallelism)
        .build()?;
    let results: Vec<(&CaseEntry, Result<Vec<EvalRecord>, String>)> = pool.install(|| {
        todo.par_iter()
            .map(|&entry| {
                let r = evaluate_one_case(cfg, entry, backend.as_ref()).map_err(|e| e.to_string());
                if let Ok(records) = &r {
                    let cp = Checkpoint {
                        config_hash: hash.clone(),
                        case_id: entry.id.clone(),
                        records: records.clone(),
                    };
                    let bytes = serde_json::to_vec(&cp).expect("records serialize");
                    if let Err(e) = write_atomic(&checkpoint_path(&cp_dir, &entry.id), &bytes) {
                        return (entry, Err(format!("checkpoint write failed: {e}")));
                    }
                    tracing::info!(case = %entry.id, records = records.len(), "case done");
                }
                (entry, r)
            })
            .collect()
    });

    let mut failed_cases = Vec::new();
    for (entry, r) in results {
        match r {
            Ok(records) => {
                done.insert(&entry.id, records);
            }
            Err(error) => failed_cases.push(CaseFailure {
                case_id: entry.id.clone(),
                error,
            }),
        }
    }

    let mut records: Vec<EvalRecord> = done.into_values().flatten().collect();
    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    write_records(out, &records)?;

    let mut by_error = BTreeMap::new();
    for r in records.iter().filter(|r| r.failed) {
        *by_error
            .entry(r.error.clone().unwrap_or_default())
            .or_insert(0) += 1;
    }
    let n_failed_slices = by_error.values().sum();
    let tally = FailureTally {
        n_records: records.len(),
        n_failed_slices,
        by_error,
        failed_cases: failed_cases.clone(),
    };
    write_json(&out.join(FAILURES_JSON), &tally)?;
    let run = RunManifest {
        config_hash: hash,
        backend_id: backend.id(),
        backend_model: model.to_string(),
        created_at: chrono::Utc::now().to_rfc3339(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        n_cases: cfg.manifest.cases.len(),
        n_records: records.len(),
        n_failed_slices,
    };
    write_json(&out.join(RUN_MANIFEST_JSON), &run)?;

    if !failed_cases.is_empty() {
        return Err(EvaluateError::CasesFailed(failed_cases));
    }
    Ok(RunSummary {
        output_dir: out.clone(),
        n_records: records.len(),
        n_failed_slices,
        evaluated_cases: todo.len(),
        resumed_cases,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvaluateError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| EvaluateError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(io_err(path))
}

/// Writes `records.jsonl` and `records.csv` under `dir`.
pub fn write_records(dir: &Path, records: &[EvalRecord]) -> Result<(), EvaluateError> {
    let mut jsonl = Vec::new();
    for r in records {
        serde_json::to_writer(&mut jsonl, r).expect("records serialize");
        jsonl.push(b'\n');
    }
    let p = dir.join(RECORDS_JSONL);
    write_atomic(&p, &jsonl).map_err(io_err(&p))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EvalRecord::CSV_HEADER)?;
    for r in records {
        w.write_record(r.csv_row())?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| csv::Error::from(e.into_error()))?;
    let p = dir.join(RECORDS_CSV);
    write_atomic(&p, &bytes).map_err(io_err(&p))
}

#[derive(Debug, Error)]
pub enum ReadRecordsError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
}

/// Reads a JSONL record file; blank lines are skipped.
pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, ReadRecordsError> {
    let io = |source| ReadRecordsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let f = fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| ReadRecordsError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}
