//! Simulated expert prompting: an initial click at the deepest GT pixel,
//! corrective clicks at the center of the largest error region, and one of
//! three rules for choosing among the backend's candidate masks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    self, BackendError, BoxPrompt, PointPrompt, PredictionTriple, SegmentationRequest, Segmenter,
};
use crate::mask::{
    self, difference, interior_center, largest_component, BinaryMask2D, MaskError, RleMask,
};
use crate::volume::{
    crop, extract_slice, normalize_intensities, tumor_bounding_roi, tumor_core_mask, BinaryVolume,
    Orientation, Roi3D, Volume, VolumeError,
};

/// Evaluation prompt budget.
pub const MAX_POINTS: usize = 9;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("ground truth mask is empty")]
    EmptyGroundTruth,
    #[error("image is {image:?} but ground truth is {truth:?}")]
    DimensionMismatch {
        image: (usize, usize),
        truth: (usize, usize),
    },
    #[error("previous_slice policy requires a previous mask")]
    MissingPreviousMask,
    #[error("prompt budget must be at least 1")]
    InvalidBudget,
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Oracle,
    Suggested,
    PreviousSlice,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Oracle => "oracle",
            PolicyKind::Suggested => "suggested",
            PolicyKind::PreviousSlice => "previous_slice",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(PolicyKind::Oracle),
            "suggested" => Ok(PolicyKind::Suggested),
            "previous_slice" => Ok(PolicyKind::PreviousSlice),
            other => Err(format!("unknown policy '{other}'")),
        }
    }
}

/// Which of the three candidates the simulated user keeps.
#[derive(Debug, Clone, Copy)]
pub struct SelectionPolicy<'a> {
    pub kind: PolicyKind,
    pub previous_mask: Option<&'a BinaryMask2D>,
}

impl<'a> SelectionPolicy<'a> {
    pub fn oracle() -> Self {
        SelectionPolicy {
            kind: PolicyKind::Oracle,
            previous_mask: None,
        }
    }

    pub fn suggested() -> Self {
        SelectionPolicy {
            kind: PolicyKind::Suggested,
            previous_mask: None,
        }
    }

    pub fn previous_slice(previous: &'a BinaryMask2D) -> Self {
        SelectionPolicy {
            kind: PolicyKind::PreviousSlice,
            previous_mask: Some(previous),
        }
    }
}

/// Index of the first maximum.
fn argmax(values: &[f64; 3]) -> usize {
    let mut best = 0;
    for i in 1..3 {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

/// Picks a candidate according to `policy`. The returned IoU is always the
/// chosen mask's IoU against the ground truth.
pub fn select_mask(
    policy: &SelectionPolicy<'_>,
    triple: &PredictionTriple,
    gt: &BinaryMask2D,
) -> Result<(usize, f64), SessionError> {
    let calculated = calculated_ious(triple, gt)?;
    let index = match policy.kind {
        PolicyKind::Oracle => argmax(&calculated),
        PolicyKind::Suggested => argmax(&triple.predicted_iou),
        PolicyKind::PreviousSlice => {
            let prev = policy
                .previous_mask
                .ok_or(SessionError::MissingPreviousMask)?;
            let sim = [
                mask::iou(&triple.masks[0], prev)?,
                mask::iou(&triple.masks[1], prev)?,
                mask::iou(&triple.masks[2], prev)?,
            ];
            argmax(&sim)
        }
    };
    Ok((index, calculated[index]))
}

fn calculated_ious(triple: &PredictionTriple, gt: &BinaryMask2D) -> Result<[f64; 3], MaskError> {
    Ok([
        mask::iou(&triple.masks[0], gt)?,
        mask::iou(&triple.masks[1], gt)?,
        mask::iou(&triple.masks[2], gt)?,
    ])
}

/// Foreground click at the deepest pixel of the ground truth.
pub fn initial_prompt(gt: &BinaryMask2D) -> Result<PointPrompt, SessionError> {
    let c = interior_center(gt).map_err(|_| SessionError::EmptyGroundTruth)?;
    Ok(PointPrompt::foreground(c))
}

/// Corrective click, or `None` when the prediction already equals the truth.
///
/// Under-segmentation (|gt| > |pred|) gets a foreground click in `gt − pred`,
/// anything else a background click in `pred − gt`; if the preferred
/// difference is empty the other one is used. The click lands on the deepest
/// pixel of the largest 8-connected region of the difference.
pub fn next_prompt(
    gt: &BinaryMask2D,
    pred: &BinaryMask2D,
) -> Result<Option<PointPrompt>, MaskError> {
    let missed = difference(gt, pred)?;
    let extra = difference(pred, gt)?;
    let fg_first = gt.count() > pred.count();
    let order = if fg_first {
        [(true, &missed), (false, &extra)]
    } else {
        [(false, &extra), (true, &missed)]
    };
    for (foreground, diff) in order {
        if diff.is_empty() {
            continue;
        }
        let c = interior_center(&largest_component(diff))?;
        return Ok(Some(if foreground {
            PointPrompt::foreground(c)
        } else {
            PointPrompt::background(c)
        }));
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStep {
    /// The click added at this step.
    pub prompt: PointPrompt,
    pub calculated_iou: [f64; 3],
    pub predicted_iou: [f64; 3],
    pub selected_index: usize,
    pub selected_iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub steps: Vec<SessionStep>,
    pub best_iou: f64,
    /// 1-based.
    pub best_step: usize,
    pub final_mask: BinaryMask2D,
    /// The selected mask matched the truth before the budget ran out.
    pub terminated_early: bool,
}

impl SessionResult {
    pub fn step_ious(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.selected_iou).collect()
    }
}

/// Runs the prompting loop for one slice. Every backend call carries all
/// clicks placed so far (plus the optional box).
pub fn run_session(
    backend: &dyn Segmenter,
    image: &crate::volume::SliceImage,
    gt: &BinaryMask2D,
    policy: &SelectionPolicy<'_>,
    max_points: usize,
    bbox: Option<BoxPrompt>,
) -> Result<SessionResult, SessionError> {
    if max_points == 0 {
        return Err(SessionError::InvalidBudget);
    }
    if gt.dims() != (image.width(), image.height()) {
        return Err(SessionError::DimensionMismatch {
            image: (image.width(), image.height()),
            truth: gt.dims(),
        });
    }
    if policy.kind == PolicyKind::PreviousSlice {
        let prev = policy
            .previous_mask
            .ok_or(SessionError::MissingPreviousMask)?;
        if prev.dims() != gt.dims() {
            return Err(MaskError::DimensionMismatch {
                left: prev.dims(),
                right: gt.dims(),
            }
            .into());
        }
    }
    backend.prime(image, gt);

    let mut points = vec![initial_prompt(gt)?];
    let mut steps = Vec::new();
    let mut best: Option<(f64, usize, BinaryMask2D)> = None;
    let mut terminated_early = false;

    loop {
        let req = SegmentationRequest::new(image, &points, bbox);
        let triple = backend::predict(backend, &req)?;
        let calculated_iou = calculated_ious(&triple, gt)?;
        let (selected_index, selected_iou) = select_mask(policy, &triple, gt)?;
        steps.push(SessionStep {
            prompt: *points.last().expect("at least one point"),
            calculated_iou,
            predicted_iou: triple.predicted_iou,
            selected_index,
            selected_iou,
        });
        let [m0, m1, m2] = triple.masks;
        let selected = match selected_index {
            0 => m0,
            1 => m1,
            _ => m2,
        };
        if best.as_ref().is_none_or(|(b, _, _)| selected_iou > *b) {
            best = Some((selected_iou, steps.len(), selected.clone()));
        }
        if selected_iou == 1.0 {
            terminated_early = true;
            break;
        }
        if points.len() >= max_points {
            break;
        }
        match next_prompt(gt, &selected)? {
            Some(p) => points.push(p),
            None => {
                terminated_early = true;
                break;
            }
        }
    }

    let (best_iou, best_step, final_mask) = best.expect("at least one step");
    Ok(SessionResult {
        steps,
        best_iou,
        best_step,
        final_mask,
        terminated_early,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Grade {
    #[serde(rename = "HGG")]
    Hgg,
    #[serde(rename = "LGG")]
    Lgg,
}

impl Grade {
    pub fn as_str(self) -> &'static str {
        match self {
            Grade::Hgg => "HGG",
            Grade::Lgg => "LGG",
        }
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Grade {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "HGG" => Ok(Grade::Hgg),
            "LGG" => Ok(Grade::Lgg),
            other => Err(format!("unknown grade '{other}'")),
        }
    }
}

/// Intensity and label volumes of one case on a shared grid.
#[derive(Debug, Clone)]
pub struct CaseVolumes {
    pub case_id: String,
    pub grade: Grade,
    pub intensity: Volume,
    pub labels: Volume,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxMode {
    #[default]
    None,
    /// Box fitted to the 3D tumor extent, projected onto each slice.
    TumorExtent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub core_labels: Vec<i32>,
    pub margin_mm: f64,
    pub max_points: usize,
    pub box_prompt: BoxMode,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            core_labels: vec![1, 4],
            margin_mm: 20.0,
            max_points: MAX_POINTS,
            box_prompt: BoxMode::None,
        }
    }
}

/// One evaluated slice. Serialized as a JSON line; [`EvalRecord::csv_row`]
/// gives the tabular form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub case_id: String,
    pub grade: Grade,
    pub orientation: Orientation,
    pub slice_index: usize,
    pub policy: PolicyKind,
    pub cropped: bool,
    pub gt_area_mm2: f64,
    pub best_iou: Option<f64>,
    pub best_step: Option<usize>,
    pub n_steps: usize,
    pub step_ious: Vec<f64>,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// previous_slice policy: this slice had no earlier mask and used oracle selection.
    #[serde(default)]
    pub oracle_seeded: bool,
    /// Crop box in source-grid voxels when `cropped`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<Roi3D>,
    /// Final mask in the (possibly cropped) slice grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_mask: Option<RleMask>,
}

impl EvalRecord {
    pub const CSV_HEADER: [&'static str; 20] = [
        "case_id",
        "grade",
        "orientation",
        "slice_index",
        "policy",
        "cropped",
        "gt_area_mm2",
        "best_iou",
        "best_step",
        "n_steps",
        "iou_step_1",
        "iou_step_2",
        "iou_step_3",
        "iou_step_4",
        "iou_step_5",
        "iou_step_6",
        "iou_step_7",
        "iou_step_8",
        "iou_step_9",
        "failed",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        let mut row = vec![
            self.case_id.clone(),
            self.grade.to_string(),
            self.orientation.to_string(),
            self.slice_index.to_string(),
            self.policy.to_string(),
            self.cropped.to_string(),
            self.gt_area_mm2.to_string(),
            self.best_iou.map(|v| v.to_string()).unwrap_or_default(),
            self.best_step.map(|v| v.to_string()).unwrap_or_default(),
            self.n_steps.to_string(),
        ];
        for i in 0..MAX_POINTS {
            row.push(
                self.step_ious
                    .get(i)
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
            );
        }
        row.push(self.failed.to_string());
        row
    }

    /// Sort key for record files: case, orientation, slice, policy, cropped.
    pub fn sort_key(&self) -> (&str, Orientation, usize, PolicyKind, bool) {
        (
            &self.case_id,
            self.orientation,
            self.slice_index,
            self.policy,
            self.cropped,
        )
    }
}

/// Slice grids and ground truth prepared for evaluation of one case.
pub struct PreparedCase {
    pub normalized: Volume,
    pub core: BinaryVolume,
    pub roi: Option<Roi3D>,
    /// Tumor extent (margin 0) in the prepared grid.
    pub tumor_extent: Option<Roi3D>,
}

/// Normalizes over the full 3D dataset, then optionally crops both volumes
/// to the tumor box plus margin.
pub fn prepare_case(
    case: &CaseVolumes,
    cropped: bool,
    settings: &EvalSettings,
) -> Result<PreparedCase, SessionError> {
    let [a, b] = [case.intensity.dims(), case.labels.dims()];
    if a != b {
        return Err(VolumeError::GridMismatch(a, b).into());
    }
    let normalized = normalize_intensities(&case.intensity)?;
    let core = tumor_core_mask(&case.labels, &settings.core_labels)?;
    let extent = |core: &BinaryVolume| match tumor_bounding_roi(core, 0.0) {
        Ok(r) => Ok(Some(r)),
        Err(VolumeError::NoTumorVoxels) => Ok(None),
        Err(e) => Err(e),
    };
    if !cropped {
        let tumor_extent = extent(&core)?;
        return Ok(PreparedCase {
            normalized,
            core,
            roi: None,
            tumor_extent,
        });
    }
    let roi = match tumor_bounding_roi(&core, settings.margin_mm) {
        Ok(r) => r,
        Err(VolumeError::NoTumorVoxels) => {
            return Ok(PreparedCase {
                normalized,
                core,
                roi: None,
                tumor_extent: None,
            })
        }
        Err(e) => return Err(e.into()),
    };
    let normalized = crop(&normalized, &roi)?;
    let core = core.crop(&roi)?;
    let tumor_extent = extent(&core)?;
    Ok(PreparedCase {
        normalized,
        core,
        roi: Some(roi),
        tumor_extent,
    })
}

fn slice_box(extent: &Roi3D, orientation: Orientation) -> BoxPrompt {
    let (u, v) = orientation.plane_axes();
    BoxPrompt {
        min: [extent.min[u], extent.min[v]],
        max: [extent.max[u], extent.max[v]],
    }
}

/// Evaluates every slice along `orientation` that contains tumor core.
///
/// Backend failures become `failed` records; volume errors abort the case.
/// Under the previous_slice policy slices are processed in ascending order and
/// each one is compared against the last successful final mask; the first
/// slice uses oracle selection.
pub fn evaluate_case(
    case: &CaseVolumes,
    orientation: Orientation,
    policy: PolicyKind,
    cropped: bool,
    backend: &dyn Segmenter,
    settings: &EvalSettings,
) -> Result<Vec<EvalRecord>, SessionError> {
    let prepared = prepare_case(case, cropped, settings)?;
    evaluate_prepared(
        case,
        &prepared,
        orientation,
        policy,
        cropped,
        backend,
        settings,
    )
}

pub fn evaluate_prepared(
    case: &CaseVolumes,
    prepared: &PreparedCase,
    orientation: Orientation,
    policy: PolicyKind,
    cropped: bool,
    backend: &dyn Segmenter,
    settings: &EvalSettings,
) -> Result<Vec<EvalRecord>, SessionError> {
    let core = &prepared.core;
    let spacing = core.pixel_spacing(orientation);
    let bbox = match (settings.box_prompt, prepared.tumor_extent) {
        (BoxMode::TumorExtent, Some(ext)) => Some(slice_box(&ext, orientation)),
        _ => None,
    };
    let mut records = Vec::new();
    let mut previous: Option<BinaryMask2D> = None;

    for k in 0..core.slice_count(orientation) {
        let gt = core.slice(orientation, k)?;
        if gt.is_empty() {
            continue;
        }
        let image = extract_slice(&prepared.normalized, orientation, k)?;
        let (sel, oracle_seeded) = match (policy, previous.as_ref()) {
            (PolicyKind::Oracle, _) => (SelectionPolicy::oracle(), false),
            (PolicyKind::Suggested, _) => (SelectionPolicy::suggested(), false),
            (PolicyKind::PreviousSlice, Some(prev)) => {
                (SelectionPolicy::previous_slice(prev), false)
            }
            (PolicyKind::PreviousSlice, None) => (SelectionPolicy::oracle(), true),
        };
        let mut record = EvalRecord {
            case_id: case.case_id.clone(),
            grade: case.grade,
            orientation,
            slice_index: k,
            policy,
            cropped,
            gt_area_mm2: mask::area(&gt, spacing),
            best_iou: None,
            best_step: None,
            n_steps: 0,
            step_ious: Vec::new(),
            failed: false,
            error: None,
            oracle_seeded,
            roi: prepared.roi,
            final_mask: None,
        };
        match run_session(backend, &image, &gt, &sel, settings.max_points, bbox) {
            Ok(res) => {
                record.best_iou = Some(res.best_iou);
                record.best_step = Some(res.best_step);
                record.n_steps = res.steps.len();
                record.step_ious = res.step_ious();
                record.final_mask = Some(RleMask::encode(&res.final_mask));
                previous = Some(res.final_mask);
            }
            Err(SessionError::Backend(e)) => {
                record.failed = true;
                record.error = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
        records.push(record);
    }
    Ok(records)
}
