//! Synthetic phantom datasets laid out like a BraTS training folder.

use std::fs;
use std::path::{Path, PathBuf};

use promptseg_core::phantom::sphere_with_notch;
use promptseg_core::prompt_sim::Grade;
use promptseg_core::volume::write_volume;

use crate::manifest::{CaseEntry, CaseManifest, ManifestError};

/// Writes `n` sphere-with-notch phantoms of edge `size` under
/// `root/{HGG,LGG}/<id>/` and a `manifest.json` at the root. Grades
/// alternate starting with HGG; phantom `i` uses seed `seed + i`.
pub fn write_phantom_dataset(
    root: &Path,
    n: usize,
    size: usize,
    seed: u64,
) -> Result<CaseManifest, ManifestError> {
    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let grade = if i % 2 == 0 { Grade::Hgg } else { Grade::Lgg };
        let id = format!("phantom_{:03}", i + 1);
        let case = sphere_with_notch(&id, grade, [size; 3], seed + i as u64);
        let rel = PathBuf::from(grade.as_str()).join(&id);
        let dir = root.join(&rel);
        fs::create_dir_all(&dir).map_err(|source| ManifestError::Read {
            path: dir.clone(),
            source,
        })?;
        let intensity = rel.join(format!("{id}_t1ce.nii.gz"));
        let labels = rel.join(format!("{id}_seg.nii.gz"));
        let volume_err = |source| ManifestError::Volume {
            case: id.clone(),
            source,
        };
        write_volume(root.join(&intensity), &case.intensity).map_err(volume_err)?;
        write_volume(root.join(&labels), &case.labels).map_err(volume_err)?;
        cases.push(CaseEntry {
            id,
            intensity,
            labels: Some(labels),
            grade,
        });
    }
    let m = CaseManifest { cases };
    m.save(&root.join("manifest.json"))?;
    Ok(m)
}
