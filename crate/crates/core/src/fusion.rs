//! Stacking per-slice masks into volumes and fusing the three orientations.

use thiserror::Error;

use crate::mask::{BinaryMask2D, MaskError};
use crate::prompt_sim::EvalRecord;
use crate::volume::{BinaryVolume, Dims3, Orientation, Roi3D, VolumeError};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("slice {0} appears more than once")]
    DuplicateSlice(usize),
    #[error("slice {index} is {got:?}, expected {expected:?}")]
    SliceDims {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("volumes disagree: {0:?} vs {1:?}")]
    GridMismatch(Dims3, Dims3),
    #[error("records mix orientations or crop boxes")]
    MixedRecords,
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Volume built from the slices segmented along one orientation. Slices that
/// were never segmented are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSegmentation {
    pub orientation: Orientation,
    pub volume: BinaryVolume,
}

pub fn stack_slices(
    dims: Dims3,
    spacing: [f64; 3],
    orientation: Orientation,
    slices: &[(usize, &BinaryMask2D)],
) -> Result<StackedSegmentation, FusionError> {
    let mut volume = BinaryVolume::empty(dims, spacing)?;
    let expected = volume.slice_dims(orientation);
    let count = volume.slice_count(orientation);
    let mut seen = vec![false; count];
    for &(k, mask) in slices {
        if k >= count {
            return Err(VolumeError::SliceOutOfRange {
                orientation,
                index: k,
                len: count,
            }
            .into());
        }
        if seen[k] {
            return Err(FusionError::DuplicateSlice(k));
        }
        seen[k] = true;
        if mask.dims() != expected {
            return Err(FusionError::SliceDims {
                index: k,
                expected,
                got: mask.dims(),
            });
        }
        for p in mask.pixels() {
            let [x, y, z] = orientation.voxel_of(k, p.x, p.y);
            let i = volume.index(x, y, z);
            volume.bits_mut()[i] = true;
        }
    }
    Ok(StackedSegmentation {
        orientation,
        volume,
    })
}

/// Places a volume cropped with `roi` back into a grid of `full` dims.
pub fn uncrop(
    cropped: &BinaryVolume,
    roi: &Roi3D,
    full: Dims3,
) -> Result<BinaryVolume, FusionError> {
    roi.validate(full)?;
    if roi.extent() != cropped.dims() {
        return Err(FusionError::GridMismatch(roi.extent(), cropped.dims()));
    }
    let mut out = BinaryVolume::empty(full, cropped.spacing())?;
    let [ex, ey, ez] = cropped.dims();
    for z in 0..ez {
        for y in 0..ey {
            for x in 0..ex {
                if cropped.get(x, y, z) {
                    let i = out.index(x + roi.min[0], y + roi.min[1], z + roi.min[2]);
                    out.bits_mut()[i] = true;
                }
            }
        }
    }
    Ok(out)
}

/// Reassembles the final masks of one case and orientation into a volume on
/// the full grid. Failed records contribute nothing. Records must all share
/// the same orientation and crop box.
pub fn volume_from_records(
    records: &[&EvalRecord],
    full: Dims3,
    spacing: [f64; 3],
    orientation: Orientation,
) -> Result<BinaryVolume, FusionError> {
    let roi = records.first().and_then(|r| r.roi);
    if records
        .iter()
        .any(|r| r.orientation != orientation || r.roi != roi)
    {
        return Err(FusionError::MixedRecords);
    }
    let grid = roi.map_or(full, |r| r.extent());
    let masks = records
        .iter()
        .filter_map(|r| {
            r.final_mask
                .as_ref()
                .map(|m| m.decode().map(|m| (r.slice_index, m)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let slices: Vec<(usize, &BinaryMask2D)> = masks.iter().map(|(k, m)| (*k, m)).collect();
    let stacked = stack_slices(grid, spacing, orientation, &slices)?.volume;
    match roi {
        Some(r) => uncrop(&stacked, &r, full),
        None => Ok(stacked),
    }
}

/// Voxel-wise vote: true where at least two inputs are true.
pub fn majority_vote(
    a: &BinaryVolume,
    b: &BinaryVolume,
    c: &BinaryVolume,
) -> Result<BinaryVolume, FusionError> {
    for other in [b, c] {
        if other.dims() != a.dims() {
            return Err(FusionError::GridMismatch(a.dims(), other.dims()));
        }
    }
    let bits = a
        .bits()
        .iter()
        .zip(b.bits())
        .zip(c.bits())
        .map(|((&x, &y), &z)| (x as u8 + y as u8 + z as u8) >= 2)
        .collect();
    Ok(BinaryVolume::new(a.dims(), a.spacing(), bits)?)
}

/// 2|A∩B| / (|A|+|B|), 1.0 when both are empty.
pub fn volumetric_dice(pred: &BinaryVolume, gt: &BinaryVolume) -> Result<f64, FusionError> {
    if pred.dims() != gt.dims() {
        return Err(FusionError::GridMismatch(pred.dims(), gt.dims()));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(bits: &[bool]) -> BinaryVolume {
        BinaryVolume::new([bits.len(), 1, 1], [1.0; 3], bits.to_vec()).unwrap()
    }

    #[test]
    fn majority_examples() {
        let a = vol(&[true, true, false, false]);
        let b = vol(&[true, false, true, false]);
        let c = vol(&[false, true, true, false]);
        assert_eq!(
            majority_vote(&a, &b, &c).unwrap().bits(),
            &[true, true, true, false]
        );
        let z = vol(&[false; 4]);
        assert_eq!(majority_vote(&a, &z, &z).unwrap().count(), 0);
    }

    #[test]
    fn dice_examples() {
        let e = vol(&[false; 3]);
        assert_eq!(volumetric_dice(&e, &e).unwrap(), 1.0);
        let a = vol(&[true, true, false]);
        let b = vol(&[true, false, false]);
        assert!((volumetric_dice(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            volumetric_dice(&a, &vol(&[false, false, true])).unwrap(),
            0.0
        );
    }

    #[test]
    fn stack_places_voxels_per_orientation() {
        let dims = [3, 4, 5];
        for o in Orientation::ALL {
            let (w, h) = crate::volume::BinaryVolume::empty(dims, [1.0; 3])
                .unwrap()
                .slice_dims(o);
            let mut m = BinaryMask2D::new(w, h);
            m.set(w - 1, h - 1, true);
            let s = stack_slices(dims, [1.0; 3], o, &[(1, &m)]).unwrap();
            assert_eq!(s.volume.count(), 1);
            assert_eq!(s.volume.slice(o, 1).unwrap(), m);
        }
    }

    #[test]
    fn stack_rejects_duplicates_and_bad_dims() {
        let m = BinaryMask2D::new(3, 4);
        assert!(matches!(
            stack_slices(
                [3, 4, 5],
                [1.0; 3],
                Orientation::Transversal,
                &[(0, &m), (0, &m)]
            ),
            Err(FusionError::DuplicateSlice(0))
        ));
        let bad = BinaryMask2D::new(4, 3);
        assert!(matches!(
            stack_slices([3, 4, 5], [1.0; 3], Orientation::Transversal, &[(0, &bad)]),
            Err(FusionError::SliceDims { .. })
        ));
        assert!(stack_slices([3, 4, 5], [1.0; 3], Orientation::Transversal, &[(5, &m)]).is_err());
    }

    #[test]
    fn uncrop_inverts_crop() {
        let full =
            BinaryVolume::new([4, 4, 4], [1.0; 3], (0..64).map(|i| i % 7 == 0).collect()).unwrap();
        let roi = Roi3D {
            min: [0, 0, 0],
            max: [3, 3, 3],
        };
        let back = uncrop(&full.crop(&roi).unwrap(), &roi, [4, 4, 4]).unwrap();
        assert_eq!(back, full);
        let roi = Roi3D {
            min: [1, 2, 0],
            max: [2, 3, 1],
        };
        let back = uncrop(&full.crop(&roi).unwrap(), &roi, [4, 4, 4]).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let expect = roi.contains([x, y, z]) && full.get(x, y, z);
                    assert_eq!(back.get(x, y, z), expect);
                }
            }
        }
    }
}
