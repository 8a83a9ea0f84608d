//! Case manifests: which files make up each case and its grade.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use promptseg_core::prompt_sim::{CaseVolumes, Grade};
use promptseg_core::volume::{load_volume, VolumeError, VolumeKind};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse manifest: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("case '{0}' has no label file")]
    NoLabels(String),
    #[error("case '{case}': {source}")]
    Volume { case: String, source: VolumeError },
    #[error("name_mapping.csv: {0}")]
    NameMapping(#[from] csv::Error),
    #[error("no grade found for {}", .0.join(", "))]
    UnknownGrade(Vec<String>),
    #[error("no cases found under {0}")]
    NoCases(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    /// Contrast-enhanced T1 intensity volume, relative to the dataset root.
    pub intensity: PathBuf,
    /// Label volume. Optional for interactive use, required for evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub grade: Grade,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseManifest {
    pub cases: Vec<CaseEntry>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.starts_with('.')
}

impl CaseManifest {
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|source| ManifestError::Read {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn get(&self, id: &str) -> Option<&CaseEntry> {
        self.cases.iter().find(|c| c.id == id)
    }

    /// Problems with ids and referenced files, one message per problem.
    pub fn check_files(&self, root: &Path, require_labels: bool) -> Vec<String> {
        let mut out = Vec::new();
        if self.cases.is_empty() {
            out.push("lists no cases".into());
        }
        let mut seen = HashSet::new();
        for c in &self.cases {
            if !valid_id(&c.id) {
                out.push(format!(
                    "case id '{}' may only use letters, digits, '_', '-' and '.'",
                    c.id
                ));
            }
            if !seen.insert(c.id.as_str()) {
                out.push(format!("case id '{}' is listed twice", c.id));
            }
            let p = root.join(&c.intensity);
            if !p.is_file() {
                out.push(format!(
                    "case '{}': intensity file {} not found",
                    c.id,
                    p.display()
                ));
            }
            match &c.labels {
                Some(l) if !root.join(l).is_file() => out.push(format!(
                    "case '{}': label file {} not found",
                    c.id,
                    root.join(l).display()
                )),
                None if require_labels => out.push(format!("case '{}': no label file", c.id)),
                _ => {}
            }
        }
        out
    }
}

impl CaseEntry {
    pub fn load_intensity(
        &self,
        root: &Path,
    ) -> Result<promptseg_core::volume::Volume, ManifestError> {
        load_volume(root.join(&self.intensity), VolumeKind::Intensity).map_err(|source| {
            ManifestError::Volume {
                case: self.id.clone(),
                source,
            }
        })
    }

    pub fn load_labels(
        &self,
        root: &Path,
    ) -> Result<promptseg_core::volume::Volume, ManifestError> {
        let path = self
            .labels
            .as_ref()
            .ok_or_else(|| ManifestError::NoLabels(self.id.clone()))?;
        load_volume(root.join(path), VolumeKind::Label).map_err(|source| ManifestError::Volume {
            case: self.id.clone(),
            source,
        })
    }

    pub fn load(&self, root: &Path) -> Result<CaseVolumes, ManifestError> {
        Ok(CaseVolumes {
            case_id: self.id.clone(),
            grade: self.grade,
            intensity: self.load_intensity(root)?,
            labels: self.load_labels(root)?,
        })
    }
}

fn nifti_stem(name: &str) -> Option<&str> {
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
}

/// Grade column of a BraTS `name_mapping.csv`, keyed by every subject id
/// column so that any year's folder names resolve.
fn read_name_mapping(path: &Path) -> Result<BTreeMap<String, Grade>, ManifestError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let grade_col = headers
        .iter()
        .position(|h| h.trim().eq_ignore_ascii_case("grade"));
    let mut out = BTreeMap::new();
    let Some(grade_col) = grade_col else {
        return Ok(out);
    };
    for row in rdr.records() {
        let row = row?;
        let Some(grade) = row.get(grade_col).and_then(|g| g.trim().parse().ok()) else {
            continue;
        };
        for (i, v) in row.iter().enumerate() {
            let v = v.trim();
            if i != grade_col && !v.is_empty() && v != "NA" {
                out.insert(v.to_string(), grade);
            }
        }
    }
    Ok(out)
}

fn grade_from_path(rel: &Path) -> Option<Grade> {
    rel.components().rev().find_map(|c| {
        let s = c.as_os_str().to_str()?.to_ascii_uppercase();
        if s == "HGG" || s.ends_with("_HGG") || s.starts_with("HGG_") {
            Some(Grade::Hgg)
        } else if s == "LGG" || s.ends_with("_LGG") || s.starts_with("LGG_") {
            Some(Grade::Lgg)
        } else {
            None
        }
    })
}

/// Scans `root` for case folders holding a `*_t1ce.nii[.gz]` and a
/// `*_seg.nii[.gz]` file. Grades come from `name_mapping.csv` at the root when
/// present, otherwise from an `HGG`/`LGG` folder on the case's path.
pub fn generate(root: &Path) -> Result<CaseManifest, ManifestError> {
    let mapping_path = root.join("name_mapping.csv");
    let mapping = if mapping_path.is_file() {
        read_name_mapping(&mapping_path)?
    } else {
        BTreeMap::new()
    };

    let mut found: BTreeMap<PathBuf, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| ManifestError::Read {
            path: e
                .path()
                .map_or_else(|| root.to_path_buf(), Path::to_path_buf),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let Some(stem) = entry.file_name().to_str().and_then(nifti_stem) else {
            continue;
        };
        let rel = entry
            .path()
            .strip_prefix(root)
            .expect("walk stays under root");
        let dir = rel.parent().unwrap_or(Path::new("")).to_path_buf();
        let slot = found.entry(dir).or_default();
        let lower = stem.to_ascii_lowercase();
        if lower.ends_with("_t1ce") {
            slot.0 = Some(rel.to_path_buf());
        } else if lower.ends_with("_seg") {
            slot.1 = Some(rel.to_path_buf());
        }
    }

    let mut cases = Vec::new();
    let mut ungraded = Vec::new();
    for (dir, (intensity, labels)) in found {
        let Some(intensity) = intensity else { continue };
        let id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .map(str::to_string)
            .unwrap_or_else(|| "case".into());
        let grade = mapping.get(&id).copied().or_else(|| grade_from_path(&dir));
        match grade {
            Some(grade) => cases.push(CaseEntry {
                id,
                intensity,
                labels,
                grade,
            }),
            None => ungraded.push(id),
        }
    }
    if !ungraded.is_empty() {
        return Err(ManifestError::UnknownGrade(ungraded));
    }
    if cases.is_empty() {
        return Err(ManifestError::NoCases(root.to_path_buf()));
    }
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(CaseManifest { cases })
}
