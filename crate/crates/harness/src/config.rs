//! Experiment configuration: parsing, environment fallbacks and validation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use promptseg_core::backend::{BackendConfig, BackendKind};
use promptseg_core::prompt_sim::{BoxMode, EvalSettings, PolicyKind, MAX_POINTS};
use promptseg_core::volume::Orientation;

use crate::manifest::{CaseManifest, ManifestError};

pub const ENV_DATA: &str = "PROMPTSEG_DATA";
pub const ENV_BACKEND_URL: &str = "PROMPTSEG_BACKEND_URL";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

fn default_manifest() -> PathBuf {
    PathBuf::from("manifest.json")
}

fn default_policies() -> Vec<PolicyKind> {
    vec![PolicyKind::Oracle]
}

fn default_orientations() -> Vec<Orientation> {
    vec![Orientation::Transversal]
}

fn default_cropped() -> Vec<bool> {
    vec![false]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_parallelism() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// The experiment grid plus everything needed to run it.
///
/// Relative paths resolve against the config file's directory, except
/// `manifest`, which resolves against `dataset_root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset_root: Option<PathBuf>,
    #[serde(default = "default_manifest")]
    pub manifest: PathBuf,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyKind>,
    #[serde(default = "default_orientations")]
    pub orientations: Vec<Orientation>,
    #[serde(default = "default_cropped")]
    pub cropped: Vec<bool>,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default = "defaults::max_points")]
    pub max_points: usize,
    #[serde(default = "defaults::margin_mm")]
    pub margin_mm: f64,
    #[serde(default = "defaults::core_labels")]
    pub core_labels: Vec<i32>,
    #[serde(default)]
    pub box_prompt: BoxMode,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

mod defaults {
    use super::EvalSettings;

    pub fn max_points() -> usize {
        EvalSettings::default().max_points
    }

    pub fn margin_mm() -> f64 {
        EvalSettings::default().margin_mm
    }

    pub fn core_labels() -> Vec<i32> {
        EvalSettings::default().core_labels
    }
}

/// A config whose files exist and whose values are in range.
#[derive(Debug, Clone)]
pub struct ValidatedConfig {
    pub config: ExperimentConfig,
    pub dataset_root: PathBuf,
    pub manifest: CaseManifest,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file, fills gaps from the process environment and
    /// resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok());
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_relative_to(base);
        Ok(cfg)
    }

    /// Environment values only fill settings the file leaves unset.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if self.dataset_root.is_none() {
            self.dataset_root = get(ENV_DATA).map(PathBuf::from);
        }
        if self.backend.kind == BackendKind::External && self.backend.endpoint.is_none() {
            self.backend.endpoint = get(ENV_BACKEND_URL);
        }
    }

    pub fn resolve_relative_to(&mut self, base: &Path) {
        if let Some(root) = &self.dataset_root {
            if root.is_relative() {
                self.dataset_root = Some(base.join(root));
            }
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            core_labels: self.core_labels.clone(),
            margin_mm: self.margin_mm,
            max_points: self.max_points,
            box_prompt: self.box_prompt,
        }
    }

    /// Hash over everything that can change record content. Output location
    /// and parallelism are excluded so that reruns elsewhere, or with a
    /// different pool size, share checkpoints and compare equal.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.parallelism = 0;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Checks values and files. All problems are reported together.
    pub fn validate(&self) -> Result<ValidatedConfig, ConfigError> {
        self.validate_inner(true)
    }

    /// Like [`validate`](Self::validate), but cases may lack label files:
    /// interactive annotation does not need ground truth.
    pub fn validate_for_service(&self) -> Result<ValidatedConfig, ConfigError> {
        self.validate_inner(false)
    }

    fn validate_inner(&self, require_labels: bool) -> Result<ValidatedConfig, ConfigError> {
        let mut errs = Vec::new();
        let mut err = |field: &str, message: String| {
            errs.push(FieldError {
                field: field.into(),
                message,
            })
        };
        if !(1..=MAX_POINTS).contains(&self.max_points) {
            err(
                "max_points",
                format!("must be in [1, {MAX_POINTS}], got {}", self.max_points),
            );
        }
        if !(self.margin_mm.is_finite() && self.margin_mm >= 0.0) {
            err(
                "margin_mm",
                format!("must be finite and >= 0, got {}", self.margin_mm),
            );
        }
        if self.policies.is_empty() {
            err("policies", "must list at least one policy".into());
        }
        if self.orientations.is_empty() {
            err("orientations", "must list at least one orientation".into());
        }
        if self.cropped.is_empty() {
            err("cropped", "must list at least one of true/false".into());
        }
        if self.core_labels.is_empty() {
            err("core_labels", "must list at least one label".into());
        }
        if self.parallelism == 0 {
            err("parallelism", "must be >= 1".into());
        }
        let b = &self.backend;
        if b.tolerances.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            err("backend.tolerances", "must be finite and >= 0".into());
        }
        if !(b.timeout_s.is_finite() && b.timeout_s > 0.0) {
            err("backend.timeout_s", "must be > 0".into());
        }
        if b.pool_size == 0 {
            err("backend.pool_size", "must be >= 1".into());
        }
        if b.kind == BackendKind::External && b.endpoint.is_none() {
            err(
                "backend.endpoint",
                format!("required for the external backend (or set {ENV_BACKEND_URL})"),
            );
        }

        let mut manifest = None;
        match &self.dataset_root {
            None => err("dataset_root", format!("not set (set it or {ENV_DATA})")),
            Some(root) if !root.is_dir() => err(
                "dataset_root",
                format!("{} is not a directory", root.display()),
            ),
            Some(root) => match CaseManifest::load(&root.join(&self.manifest)) {
                Ok(m) => {
                    for e in m.check_files(root, require_labels) {
                        err("manifest", e);
                    }
                    manifest = Some(m);
                }
                Err(ManifestError::Read { path, source }) => err(
                    "manifest",
                    format!("cannot read {}: {source}", path.display()),
                ),
                Err(e) => err("manifest", e.to_string()),
            },
        }

        if !errs.is_empty() {
            return Err(ConfigError::Invalid(errs));
        }
        Ok(ValidatedConfig {
            config: self.clone(),
            dataset_root: self.dataset_root.clone().expect("checked above"),
            manifest: manifest.expect("checked above"),
        })
    }
}
