//! BraTS directory layout: `<dir>/<id>_<suffix>.nii.gz` per modality plus
//! `<id>_seg.nii.gz`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};

use super::{modality_names, modality_suffixes, nonzero_union, normalize_in_mask, MultimodalVolume};
use crate::error::{Error, Result};

const LABEL_SUFFIX: &str = "seg";

/// Maps a BraTS label to a contiguous class: `{0, 1, 2, 4} -> {0, 1, 2, 3}`.
///
/// Values above 4 shift down by one so the map stays a bijection; 3 and
/// negative values are rejected.
pub fn brats_label_to_class(value: i64) -> Option<u8> {
    match value {
        0..=2 => Some(value as u8),
        4..=256 => Some((value - 1) as u8),
        _ => None,
    }
}

/// Inverse of [`brats_label_to_class`].
pub fn class_to_brats_label(class: u8) -> i16 {
    match class {
        0..=2 => class as i16,
        c => c as i16 + 1,
    }
}

fn find_file(dir: &Path, suffix: &str) -> Result<Option<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut hits = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let stem = name
            .strip_suffix(".nii.gz")
            .or_else(|| name.strip_suffix(".nii"));
        if stem.is_some_and(|s| s.ends_with(&format!("_{suffix}"))) {
            hits.push(entry.path());
        }
    }
    hits.sort();
    match hits.len() {
        0 => Ok(None),
        1 => Ok(hits.pop()),
        _ => Err(Error::contract(format!(
            "several files match *_{suffix} in {}",
            dir.display()
        ))),
    }
}

fn read_volume(path: &Path) -> Result<Array3<f32>> {
    let nifti_err = |source| Error::Nifti {
        path: path.to_path_buf(),
        source,
    };
    let obj = ReaderOptions::new().read_file(path).map_err(nifti_err)?;
    let data = obj.into_volume().into_ndarray::<f32>().map_err(nifti_err)?;
    let shape = data.shape().to_vec();
    let squeezed = match shape.len() {
        3 => data,
        4 if shape[3] == 1 => data.index_axis_move(ndarray::Axis(3), 0),
        _ => {
            return Err(Error::contract(format!(
                "{} is not a 3D volume (shape {shape:?})",
                path.display()
            )))
        }
    };
    Ok(squeezed
        .into_dimensionality::<Ix3>()
        .expect("rank checked above")
        .as_standard_layout()
        .to_owned())
}

/// Loads a four-modality BraTS subject in `(FLAIR, T1, T1c, T2)` order.
pub fn load_brats_subject(dir: impl AsRef<Path>) -> Result<MultimodalVolume> {
    load_subject(dir, 4)
}

/// Loads `modality_count` modalities and the label, derives the brain mask as
/// the nonzero union, and z-scores every modality within it.
pub fn load_subject(dir: impl AsRef<Path>, modality_count: usize) -> Result<MultimodalVolume> {
    let dir = dir.as_ref();
    let names = modality_names(modality_count);
    let suffixes = modality_suffixes(modality_count);
    let mut paths = Vec::with_capacity(modality_count);
    for (name, suffix) in names.iter().zip(&suffixes).chain([(&"label".to_string(), &LABEL_SUFFIX.to_string())]) {
        let path = find_file(dir, suffix)?.ok_or_else(|| Error::ModalityFileAbsent {
            modality: name.clone(),
            suffix: suffix.clone(),
            dir: dir.to_path_buf(),
        })?;
        paths.push(path);
    }
    let label_path = paths.pop().expect("label path pushed last");

    let raw: Vec<Array3<f32>> = paths.iter().map(|p| read_volume(p)).collect::<Result<_>>()?;
    let shape = raw[0].shape().to_vec();
    for v in &raw[1..] {
        if v.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: shape.clone(),
                actual: v.shape().to_vec(),
            });
        }
    }
    let label_raw = read_volume(&label_path)?;
    if label_raw.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            expected: shape,
            actual: label_raw.shape().to_vec(),
        });
    }
    let mut label = Array3::<u8>::zeros(label_raw.raw_dim());
    for (c, &v) in label.iter_mut().zip(label_raw.iter()) {
        let r = v.round();
        let class = if (v - r).abs() <= 1e-3 {
            brats_label_to_class(r as i64)
        } else {
            None
        };
        *c = class.ok_or_else(|| Error::InvalidLabel {
            value: r as i64,
            context: label_path.display().to_string(),
        })?;
    }

    let brain_mask = nonzero_union(&raw);
    let volumes = raw
        .iter()
        .map(|v| normalize_in_mask(v, &brain_mask))
        .collect::<Result<Vec<_>>>()?;
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    MultimodalVolume::new(id, volumes, label, brain_mask)
}

/// Writes `subject` into `dir` using the BraTS naming scheme.
pub fn write_brats_subject(dir: impl AsRef<Path>, subject: &MultimodalVolume) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id = &subject.subject_id;
    for (v, suffix) in subject.volumes.iter().zip(modality_suffixes(subject.modality_count())) {
        let path = dir.join(format!("{id}_{suffix}.nii.gz"));
        WriterOptions::new(&path)
            .write_nifti(v)
            .map_err(|source| Error::Nifti { path: path.clone(), source })?;
    }
    let path = dir.join(format!("{id}_{LABEL_SUFFIX}.nii.gz"));
    WriterOptions::new(&path)
        .write_nifti(&subject.label.mapv(class_to_brats_label))
        .map_err(|source| Error::Nifti { path: path.clone(), source })?;
    Ok(())
}
