//! Synthetic labelled volumes for tests and demos.
//!
//! Labels follow the usual glioma convention: 1 necrotic core, 2 edema,
//! 4 enhancing tumor. Intensities are integer-valued with a little uniform
//! noise from a seeded generator, so every phantom is reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::prompt_sim::{CaseVolumes, Grade};
use crate::volume::{Dims3, Volume, VolumeKind};

pub const LABEL_NECROTIC: i32 = 1;
pub const LABEL_EDEMA: i32 = 2;
pub const LABEL_ENHANCING: i32 = 4;

/// Mean intensity of a tissue class. Label -1 marks brain outside the tumor;
/// 0 is air outside the head.
pub fn tissue_intensity(label: i32) -> f32 {
    match label {
        LABEL_NECROTIC => 120.0,
        LABEL_EDEMA => 90.0,
        LABEL_ENHANCING => 220.0,
        -1 => 50.0,
        _ => 0.0,
    }
}

/// Builds a case from a tissue function over continuous voxel coordinates
/// (voxel `(x, y, z)` spans `[x, x + 1)` etc.). `tissue` returns a tumor
/// label, -1 for healthy brain or 0 for air. Labels are sampled at voxel
/// centers; intensities average `supersample³` samples per voxel, which gives
/// boundary voxels partial-volume values.
#[allow(clippy::too_many_arguments)]
pub fn from_tissue_fn(
    case_id: &str,
    grade: Grade,
    dims: Dims3,
    spacing: [f64; 3],
    noise: f32,
    supersample: usize,
    seed: u64,
    tissue: impl Fn([f64; 3]) -> i32,
) -> CaseVolumes {
    let ss = supersample.max(1);
    let offsets: Vec<f64> = (0..ss).map(|i| (i as f64 + 0.5) / ss as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    let mut intensity = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let (xf, yf, zf) = (x as f64, y as f64, z as f64);
                let t = tissue([xf + 0.5, yf + 0.5, zf + 0.5]);
                let mut base = 0.0f32;
                for oz in &offsets {
                    for oy in &offsets {
                        for ox in &offsets {
                            base += tissue_intensity(tissue([xf + ox, yf + oy, zf + oz]));
                        }
                    }
                }
                let base = (base / (ss * ss * ss) as f32).round();
                let jitter = if noise > 0.0 && t != 0 {
                    rng.random_range(-noise..=noise).round()
                } else {
                    0.0
                };
                intensity.push((base + jitter).max(0.0));
                labels.push(t.max(0) as f32);
            }
        }
    }
    CaseVolumes {
        case_id: case_id.to_string(),
        grade,
        intensity: Volume::new(dims, spacing, intensity, VolumeKind::Intensity)
            .expect("phantom grid is valid"),
        labels: Volume::new(dims, spacing, labels, VolumeKind::Label)
            .expect("phantom grid is valid"),
    }
}

/// Spherical tumor (necrotic center, enhancing rim, edema shell) inside a
/// spherical head, with a slot cut into the tumor from the +x side so the
/// core is not convex.
pub fn sphere_with_notch(case_id: &str, grade: Grade, dims: Dims3, seed: u64) -> CaseVolumes {
    let c = [
        dims[0] as f64 / 2.0,
        dims[1] as f64 / 2.0,
        dims[2] as f64 / 2.0,
    ];
    let m = dims.iter().copied().min().unwrap_or(1) as f64;
    let head = 0.46 * m;
    let r_tumor = 0.2 * m;
    let r_necrotic = 0.1 * m;
    let r_edema = 0.26 * m;
    let slot = (0.04 * m).max(1.0);
    from_tissue_fn(case_id, grade, dims, [1.0; 3], 4.0, 2, seed, move |p| {
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let in_slot = d[0] > 0.0 && d[2].abs() < slot;
        if r <= r_tumor && !in_slot {
            if r <= r_necrotic {
                LABEL_NECROTIC
            } else {
                LABEL_ENHANCING
            }
        } else if r <= r_edema {
            LABEL_EDEMA
        } else if r <= head {
            -1
        } else {
            0
        }
    })
}

/// Box-shaped enhancing tumor occupying `z_range` (inclusive) in a uniform
/// brain, on a small grid.
pub fn slab(
    case_id: &str,
    grade: Grade,
    dims: Dims3,
    z_range: (usize, usize),
    seed: u64,
) -> CaseVolumes {
    let (x0, x1) = (dims[0] / 4, 3 * dims[0] / 4);
    let (y0, y1) = (dims[1] / 4, 3 * dims[1] / 4);
    from_tissue_fn(case_id, grade, dims, [1.0; 3], 2.0, 1, seed, move |p| {
        let [x, y, z] = p.map(|v| v.floor() as usize);
        let inside = (x0..x1).contains(&x) && (y0..y1).contains(&y);
        if inside && (z_range.0..=z_range.1).contains(&z) {
            LABEL_ENHANCING
        } else {
            -1
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::tumor_core_mask;

    #[test]
    fn sphere_phantom_is_deterministic_and_labelled() {
        let a = sphere_with_notch("p", Grade::Hgg, [32, 32, 32], 7);
        let b = sphere_with_notch("p", Grade::Hgg, [32, 32, 32], 7);
        assert_eq!(a.intensity.data(), b.intensity.data());
        a.labels.validate_labels(&[0, 1, 2, 4]).unwrap();
        let core = tumor_core_mask(&a.labels, &[1, 4]).unwrap();
        assert!(core.count() > 100);
        // slot voxel at +x, z = center is not core
        assert!(!core.get(19, 16, 16));
        assert!(core.get(12, 16, 16));
    }

    #[test]
    fn slab_occupies_requested_slices() {
        let s = slab("s", Grade::Lgg, [16, 16, 30], (10, 20), 1);
        let core = tumor_core_mask(&s.labels, &[1, 4]).unwrap();
        for z in 0..30 {
            let any = (0..16).any(|y| (0..16).any(|x| core.get(x, y, z)));
            assert_eq!(any, (10..=20).contains(&z), "z = {z}");
        }
    }
}
