//! Volumetric grids, intensity normalization, oriented slicing and tumor ROIs.
//!
//! Voxel data is stored row-major with x fastest: `index = x + nx * (y + ny * z)`.

pub mod nifti;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BinaryMask2D;

pub use nifti::{
    decode_volume, encode_volume, load_volume, write_volume, NiftiDatatype, NiftiError,
};

/// Voxel counts along x, y, z.
pub type Dims3 = [usize; 3];

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid dimensions {0:?}: every axis needs at least one voxel")]
    InvalidDims(Dims3),
    #[error("invalid spacing {0:?}: every component must be positive and finite")]
    InvalidSpacing([f64; 3]),
    #[error("data length {got} does not match dims product {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("label volume contains non-integer value {0}")]
    NonIntegerLabel(f32),
    #[error("label {0} is not in the declared label set")]
    UndeclaredLabel(i32),
    #[error("expected a {expected} volume, got {got}")]
    WrongKind {
        expected: VolumeKind,
        got: VolumeKind,
    },
    #[error("degenerate intensity range: maximum intensity is {0}")]
    DegenerateIntensityRange(f32),
    #[error("slice index {index} out of range for {orientation} axis of length {len}")]
    SliceOutOfRange {
        orientation: Orientation,
        index: usize,
        len: usize,
    },
    #[error("voxel value {0} is not an 8-bit intensity; normalize the volume first")]
    NotNormalized(f32),
    #[error("core label set is empty")]
    EmptyCoreLabels,
    #[error("no tumor voxels in mask")]
    NoTumorVoxels,
    #[error("roi {roi:?} does not fit inside volume dims {dims:?}")]
    RoiOutOfBounds { roi: Roi3D, dims: Dims3 },
    #[error("grid mismatch: {0:?} vs {1:?}")]
    GridMismatch(Dims3, Dims3),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Intensity,
    Label,
}

impl fmt::Display for VolumeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VolumeKind::Intensity => "intensity",
            VolumeKind::Label => "label",
        })
    }
}

/// Slice orientation. Declaration order is the sort order used in record files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    #[serde(alias = "axial")]
    Transversal,
    Coronal,
    Sagittal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [
        Orientation::Transversal,
        Orientation::Coronal,
        Orientation::Sagittal,
    ];

    /// Axis held constant by a slice of this orientation.
    pub fn fixed_axis(self) -> usize {
        match self {
            Orientation::Transversal => 2,
            Orientation::Coronal => 1,
            Orientation::Sagittal => 0,
        }
    }

    /// Volume axes mapped to image x (columns) and image y (rows).
    pub fn plane_axes(self) -> (usize, usize) {
        match self {
            Orientation::Transversal => (0, 1),
            Orientation::Coronal => (0, 2),
            Orientation::Sagittal => (1, 2),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::Transversal => "transversal",
            Orientation::Coronal => "coronal",
            Orientation::Sagittal => "sagittal",
        }
    }

    /// Voxel coordinate of image pixel `(col, row)` on slice `k`.
    pub fn voxel_of(self, k: usize, col: usize, row: usize) -> [usize; 3] {
        match self {
            Orientation::Transversal => [col, row, k],
            Orientation::Coronal => [col, k, row],
            Orientation::Sagittal => [k, col, row],
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Orientation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "transversal" | "axial" => Ok(Orientation::Transversal),
            "coronal" => Ok(Orientation::Coronal),
            "sagittal" => Ok(Orientation::Sagittal),
            other => Err(format!("unknown orientation '{other}'")),
        }
    }
}

fn check_grid(dims: Dims3, spacing: [f64; 3], len: usize) -> Result<(), VolumeError> {
    if dims.contains(&0) {
        return Err(VolumeError::InvalidDims(dims));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(VolumeError::InvalidSpacing(spacing));
    }
    let expected = dims[0] * dims[1] * dims[2];
    if len != expected {
        return Err(VolumeError::DataLength { expected, got: len });
    }
    Ok(())
}

#[inline]
fn linear_index(dims: Dims3, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

fn slice_dims_of(dims: Dims3, orientation: Orientation) -> (usize, usize) {
    let (u, v) = orientation.plane_axes();
    (dims[u], dims[v])
}

fn plane<T: Copy>(data: &[T], dims: Dims3, orientation: Orientation, k: usize) -> Vec<T> {
    let (w, h) = slice_dims_of(dims, orientation);
    let mut out = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let [x, y, z] = orientation.voxel_of(k, col, row);
            out.push(data[linear_index(dims, x, y, z)]);
        }
    }
    out
}

fn crop_data<T: Copy>(data: &[T], dims: Dims3, roi: &Roi3D) -> Vec<T> {
    let ext = roi.extent();
    let mut out = Vec::with_capacity(ext[0] * ext[1] * ext[2]);
    for z in roi.min[2]..=roi.max[2] {
        for y in roi.min[1]..=roi.max[1] {
            let start = linear_index(dims, roi.min[0], y, z);
            out.extend_from_slice(&data[start..start + ext[0]]);
        }
    }
    out
}

/// A scalar 3D grid with millimetre spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims3,
    spacing: [f64; 3],
    data: Vec<f32>,
    kind: VolumeKind,
}

impl Volume {
    pub fn new(
        dims: Dims3,
        spacing: [f64; 3],
        data: Vec<f32>,
        kind: VolumeKind,
    ) -> Result<Self, VolumeError> {
        check_grid(dims, spacing, data.len())?;
        if kind == VolumeKind::Label {
            if let Some(&v) = data.iter().find(|v| v.fract() != 0.0 || !v.is_finite()) {
                return Err(VolumeError::NonIntegerLabel(v));
            }
        }
        Ok(Self {
            dims,
            spacing,
            data,
            kind,
        })
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        linear_index(self.dims, x, y, z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn slice_count(&self, orientation: Orientation) -> usize {
        self.dims[orientation.fixed_axis()]
    }

    pub fn slice_dims(&self, orientation: Orientation) -> (usize, usize) {
        slice_dims_of(self.dims, orientation)
    }

    pub fn pixel_spacing(&self, orientation: Orientation) -> [f64; 2] {
        let (u, v) = orientation.plane_axes();
        [self.spacing[u], self.spacing[v]]
    }

    /// Checks that every voxel of a label volume carries a declared label.
    pub fn validate_labels(&self, allowed: &[i32]) -> Result<(), VolumeError> {
        self.expect_kind(VolumeKind::Label)?;
        for &v in &self.data {
            let label = v as i32;
            if !allowed.contains(&label) {
                return Err(VolumeError::UndeclaredLabel(label));
            }
        }
        Ok(())
    }

    fn expect_kind(&self, expected: VolumeKind) -> Result<(), VolumeError> {
        if self.kind != expected {
            return Err(VolumeError::WrongKind {
                expected,
                got: self.kind,
            });
        }
        Ok(())
    }
}

/// Boolean 3D grid, used for tumor masks and stacked segmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryVolume {
    dims: Dims3,
    spacing: [f64; 3],
    bits: Vec<bool>,
}

impl BinaryVolume {
    pub fn new(dims: Dims3, spacing: [f64; 3], bits: Vec<bool>) -> Result<Self, VolumeError> {
        check_grid(dims, spacing, bits.len())?;
        Ok(Self {
            dims,
            spacing,
            bits,
        })
    }

    pub fn empty(dims: Dims3, spacing: [f64; 3]) -> Result<Self, VolumeError> {
        Self::new(dims, spacing, vec![false; dims.iter().product()])
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        linear_index(self.dims, x, y, z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn slice_count(&self, orientation: Orientation) -> usize {
        self.dims[orientation.fixed_axis()]
    }

    pub fn slice_dims(&self, orientation: Orientation) -> (usize, usize) {
        slice_dims_of(self.dims, orientation)
    }

    pub fn pixel_spacing(&self, orientation: Orientation) -> [f64; 2] {
        let (u, v) = orientation.plane_axes();
        [self.spacing[u], self.spacing[v]]
    }

    /// Ground-truth style 2D mask of slice `k`.
    pub fn slice(&self, orientation: Orientation, k: usize) -> Result<BinaryMask2D, VolumeError> {
        let len = self.slice_count(orientation);
        if k >= len {
            return Err(VolumeError::SliceOutOfRange {
                orientation,
                index: k,
                len,
            });
        }
        let (w, h) = self.slice_dims(orientation);
        let bits = plane(&self.bits, self.dims, orientation, k);
        Ok(BinaryMask2D::from_bits(w, h, bits).expect("plane length matches slice dims"))
    }

    pub fn crop(&self, roi: &Roi3D) -> Result<BinaryVolume, VolumeError> {
        roi.validate(self.dims)?;
        BinaryVolume::new(
            roi.extent(),
            self.spacing,
            crop_data(&self.bits, self.dims, roi),
        )
    }

    /// 0/1 label volume, the form exported to NIfTI.
    pub fn to_label_volume(&self) -> Volume {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Volume::new(self.dims, self.spacing, data, VolumeKind::Label)
            .expect("binary volume grid is valid")
    }

    /// Nonzero voxels of any volume.
    pub fn from_nonzero(v: &Volume) -> BinaryVolume {
        BinaryVolume {
            dims: v.dims,
            spacing: v.spacing,
            bits: v.data.iter().map(|&x| x != 0.0).collect(),
        }
    }
}

/// An 8-bit slice image. Stored single channel; the three model channels are
/// replicas of it and are produced by [`SliceImage::rgb`] / [`SliceImage::to_rgb`].
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    orientation: Orientation,
    index: usize,
    pixel_spacing: [f64; 2],
}

impl SliceImage {
    /// Panics if `pixels.len() != width * height`.
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<u8>,
        orientation: Orientation,
        index: usize,
        pixel_spacing: [f64; 2],
    ) -> Self {
        assert_eq!(pixels.len(), width * height, "slice pixel count");
        Self {
            width,
            height,
            pixels,
            orientation,
            index,
            pixel_spacing,
        }
    }

    /// Convenience constructor for synthetic images with unit spacing.
    pub fn from_gray(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        Self::new(
            width,
            height,
            pixels,
            Orientation::Transversal,
            0,
            [1.0, 1.0],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn pixel_spacing(&self) -> [f64; 2] {
        self.pixel_spacing
    }

    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn rgb(&self, col: usize, row: usize) -> [u8; 3] {
        let v = self.get(col, row);
        [v, v, v]
    }

    /// Interleaved RGB buffer with the gray value in all three channels.
    pub fn to_rgb(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|&v| [v, v, v]).collect()
    }
}

/// Inclusive voxel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Roi3D {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl Roi3D {
    pub fn full(dims: Dims3) -> Self {
        Roi3D {
            min: [0; 3],
            max: [dims[0] - 1, dims[1] - 1, dims[2] - 1],
        }
    }

    pub fn extent(&self) -> Dims3 {
        [
            self.max[0] - self.min[0] + 1,
            self.max[1] - self.min[1] + 1,
            self.max[2] - self.min[2] + 1,
        ]
    }

    pub fn validate(&self, dims: Dims3) -> Result<(), VolumeError> {
        let ok = (0..3).all(|a| self.min[a] <= self.max[a] && self.max[a] < dims[a]);
        if ok {
            Ok(())
        } else {
            Err(VolumeError::RoiOutOfBounds { roi: *self, dims })
        }
    }

    /// Maps an ROI expressed in this ROI's local coordinates back to the parent grid.
    pub fn compose(&self, inner: &Roi3D) -> Roi3D {
        Roi3D {
            min: [0, 1, 2].map(|a| self.min[a] + inner.min[a]),
            max: [0, 1, 2].map(|a| self.min[a] + inner.max[a]),
        }
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Rescales intensities to `[0, 255]` by the global maximum of the volume.
pub fn normalize_intensities(v: &Volume) -> Result<Volume, VolumeError> {
    v.expect_kind(VolumeKind::Intensity)?;
    let max = v.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(max > 0.0) {
        return Err(VolumeError::DegenerateIntensityRange(max));
    }
    let max = f64::from(max);
    let data = v
        .data
        .iter()
        .map(|&x| round_half_up(255.0 * f64::from(x) / max).clamp(0.0, 255.0) as f32)
        .collect();
    Ok(Volume {
        dims: v.dims,
        spacing: v.spacing,
        data,
        kind: VolumeKind::Intensity,
    })
}

/// Extracts slice `index` of a normalized volume.
pub fn extract_slice(
    v: &Volume,
    orientation: Orientation,
    index: usize,
) -> Result<SliceImage, VolumeError> {
    let len = v.slice_count(orientation);
    if index >= len {
        return Err(VolumeError::SliceOutOfRange {
            orientation,
            index,
            len,
        });
    }
    let (w, h) = v.slice_dims(orientation);
    let pixels = plane(&v.data, v.dims, orientation, index)
        .into_iter()
        .map(|x| {
            if (0.0..=255.0).contains(&x) && x.fract() == 0.0 {
                Ok(x as u8)
            } else {
                Err(VolumeError::NotNormalized(x))
            }
        })
        .collect::<Result<Vec<u8>, _>>()?;
    Ok(SliceImage::new(
        w,
        h,
        pixels,
        orientation,
        index,
        v.pixel_spacing(orientation),
    ))
}

/// Voxels whose label belongs to `core_labels`.
pub fn tumor_core_mask(labels: &Volume, core_labels: &[i32]) -> Result<BinaryVolume, VolumeError> {
    labels.expect_kind(VolumeKind::Label)?;
    if core_labels.is_empty() {
        return Err(VolumeError::EmptyCoreLabels);
    }
    let bits = labels
        .data
        .iter()
        .map(|&v| core_labels.contains(&(v as i32)))
        .collect();
    BinaryVolume::new(labels.dims, labels.spacing, bits)
}

/// Tight bounding box of the mask grown by `floor(margin_mm / spacing)` voxels
/// per axis and clipped to the grid.
pub fn tumor_bounding_roi(core: &BinaryVolume, margin_mm: f64) -> Result<Roi3D, VolumeError> {
    let dims = core.dims;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if core.bits[linear_index(dims, x, y, z)] {
                    any = true;
                    for (a, c) in [x, y, z].into_iter().enumerate() {
                        lo[a] = lo[a].min(c);
                        hi[a] = hi[a].max(c);
                    }
                }
            }
        }
    }
    if !any {
        return Err(VolumeError::NoTumorVoxels);
    }
    let margin_mm = margin_mm.max(0.0);
    let mut roi = Roi3D { min: lo, max: hi };
    for a in 0..3 {
        let m = (margin_mm / core.spacing[a]).floor() as usize;
        roi.min[a] = lo[a].saturating_sub(m);
        roi.max[a] = (hi[a] + m).min(dims[a] - 1);
    }
    Ok(roi)
}

/// Copies the ROI into a new volume with the same spacing.
pub fn crop(v: &Volume, roi: &Roi3D) -> Result<Volume, VolumeError> {
    roi.validate(v.dims)?;
    Ok(Volume {
        dims: roi.extent(),
        spacing: v.spacing,
        data: crop_data(&v.data, v.dims, roi),
        kind: v.kind,
    })
}
