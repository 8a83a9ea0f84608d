//! Per-case 3D fusion of evaluation records or exported volumes.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use promptseg_core::fusion::{majority_vote, volume_from_records, volumetric_dice, FusionError};
use promptseg_core::prompt_sim::{EvalRecord, PolicyKind};
use promptseg_core::volume::{BinaryVolume, Orientation};

#[derive(Debug, Error)]
pub enum FuseError {
    #[error("case '{case}': {source}")]
    Fusion { case: String, source: FusionError },
    #[error("case '{case}': cannot load ground truth: {message}")]
    GroundTruth { case: String, message: String },
}

/// Dice of each orientation's stacked segmentation against ground truth,
/// plus the majority vote when all three orientations are present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFusion {
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cropped: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice_axial: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice_sagittal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice_coronal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice_majority: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FusionReport {
    pub cases: Vec<CaseFusion>,
}

/// Scores stacked volumes of one case. A majority vote needs all three
/// orientations; otherwise a warning is attached and the column is omitted.
pub fn fuse_volumes(
    case_id: &str,
    stacks: &BTreeMap<Orientation, BinaryVolume>,
    gt: &BinaryVolume,
) -> Result<CaseFusion, FusionError> {
    let dice = |o| stacks.get(&o).map(|v| volumetric_dice(v, gt)).transpose();
    let mut row = CaseFusion {
        case_id: case_id.to_string(),
        policy: None,
        cropped: None,
        dice_axial: dice(Orientation::Transversal)?,
        dice_sagittal: dice(Orientation::Sagittal)?,
        dice_coronal: dice(Orientation::Coronal)?,
        dice_majority: None,
        warnings: Vec::new(),
    };
    match (
        stacks.get(&Orientation::Transversal),
        stacks.get(&Orientation::Coronal),
        stacks.get(&Orientation::Sagittal),
    ) {
        (Some(a), Some(b), Some(c)) => {
            row.dice_majority = Some(volumetric_dice(&majority_vote(a, b, c)?, gt)?);
        }
        _ => {
            let missing: Vec<&str> = Orientation::ALL
                .iter()
                .filter(|o| !stacks.contains_key(o))
                .map(|o| o.as_str())
                .collect();
            row.warnings.push(format!(
                "majority vote skipped: missing {}",
                missing.join(", ")
            ));
        }
    }
    Ok(row)
}

/// Groups records by (case, policy, cropped) and scores each group against the
/// ground truth supplied by `load_gt`.
pub fn fuse_records<E: std::fmt::Display>(
    records: &[EvalRecord],
    mut load_gt: impl FnMut(&str) -> Result<BinaryVolume, E>,
) -> Result<FusionReport, FuseError> {
    type Key<'a> = (&'a str, PolicyKind, bool);
    let mut groups: BTreeMap<Key<'_>, BTreeMap<Orientation, Vec<&EvalRecord>>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.case_id.as_str(), r.policy, r.cropped))
            .or_default()
            .entry(r.orientation)
            .or_default()
            .push(r);
    }
    let mut gts: BTreeMap<&str, BinaryVolume> = BTreeMap::new();
    let mut cases = Vec::new();
    for ((case, policy, cropped), by_orientation) in groups {
        if !gts.contains_key(case) {
            let gt = load_gt(case).map_err(|e| FuseError::GroundTruth {
                case: case.to_string(),
                message: e.to_string(),
            })?;
            gts.insert(case, gt);
        }
        let gt = &gts[case];
        let wrap = |source| FuseError::Fusion {
            case: case.to_string(),
            source,
        };
        let mut stacks = BTreeMap::new();
        let mut failed = 0;
        for (o, recs) in by_orientation {
            failed += recs.iter().filter(|r| r.failed).count();
            let v = volume_from_records(&recs, gt.dims(), gt.spacing(), o).map_err(wrap)?;
            stacks.insert(o, v);
        }
        let mut row = fuse_volumes(case, &stacks, gt).map_err(wrap)?;
        row.policy = Some(policy);
        row.cropped = Some(cropped);
        if failed > 0 {
            row.warnings
                .push(format!("{failed} failed slice(s) contribute empty masks"));
        }
        cases.push(row);
    }
    Ok(FusionReport { cases })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |d| format!("{d:.4}"))
}

impl FusionReport {
    pub fn to_markdown(&self) -> String {
        let majority = self.cases.iter().any(|c| c.dice_majority.is_some());
        let mut s = String::from(
            "# Volumetric Dice\n\n| case | policy | cropped | axial | coronal | sagittal |",
        );
        if majority {
            s.push_str(" majority |");
        }
        s.push_str("\n|---|---|---|---|---|---|");
        if majority {
            s.push_str("---|");
        }
        s.push('\n');
        for c in &self.cases {
            let _ = write!(
                s,
                "| {} | {} | {} | {} | {} | {} |",
                c.case_id,
                c.policy.map_or("-", |p| p.as_str()),
                c.cropped.map_or_else(|| "-".into(), |b| b.to_string()),
                cell(c.dice_axial),
                cell(c.dice_coronal),
                cell(c.dice_sagittal),
            );
            if majority {
                let _ = write!(s, " {} |", cell(c.dice_majority));
            }
            s.push('\n');
        }
        let warnings: Vec<String> = self
            .cases
            .iter()
            .flat_map(|c| {
                c.warnings
                    .iter()
                    .map(move |w| format!("- {}: {w}", c.case_id))
            })
            .collect();
        if !warnings.is_empty() {
            s.push_str("\n## Warnings\n\n");
            s.push_str(&warnings.join("\n"));
            s.push('\n');
        }
        s
    }
}
