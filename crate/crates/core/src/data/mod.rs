//! Volumes, preprocessing, augmentation, the synthetic phantom generator and
//! BraTS-layout file I/O.

mod augment;
mod brats;
mod dataset;
mod normalize;
mod phantom;


use ndarray::{Array3, Zip};

use crate::error::{Error, Result};

pub use augment::{augment, augment_with_rng, AugmentationConfig};
pub use brats::{brats_label_to_class, class_to_brats_label, load_brats_subject, load_subject, write_brats_subject};
pub use dataset::{
    generate_phantom_dataset, load_dataset, split_by_subject, subject_hash, Manifest, PHANTOM_SIDECAR,
    MANIFEST_FILE,
};
pub use normalize::{normalize_in_mask, STD_FLOOR};
pub use phantom::{generate_phantom, IntensityTransfer, PhantomSpec};

/// Modality names in report column order.
pub const BRATS_MODALITIES: [&str; 4] = ["FLAIR", "T1", "T1c", "T2"];
/// File suffixes matching [`BRATS_MODALITIES`].
pub const BRATS_SUFFIXES: [&str; 4] = ["flair", "t1", "t1ce", "t2"];

/// Display names for `m` modalities: the BraTS names when `m == 4`,
/// `M1..Mm` otherwise.
pub fn modality_names(m: usize) -> Vec<String> {
    if m == BRATS_MODALITIES.len() {
        BRATS_MODALITIES.iter().map(|s| s.to_string()).collect()
    } else {
        (1..=m).map(|j| format!("M{j}")).collect()
    }
}

/// File suffixes for `m` modalities, parallel to [`modality_names`].
pub fn modality_suffixes(m: usize) -> Vec<String> {
    if m == BRATS_SUFFIXES.len() {
        BRATS_SUFFIXES.iter().map(|s| s.to_string()).collect()
    } else {
        (1..=m).map(|j| format!("m{j}")).collect()
    }
}

/// One co-registered multimodal subject.
///
/// Invariant: every volume, the label and the brain mask share one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalVolume {
    pub subject_id: String,
    pub volumes: Vec<Array3<f32>>,
    pub label: Array3<u8>,
    pub brain_mask: Array3<bool>,
}

impl MultimodalVolume {
    pub fn new(
        subject_id: impl Into<String>,
        volumes: Vec<Array3<f32>>,
        label: Array3<u8>,
        brain_mask: Array3<bool>,
    ) -> Result<Self> {
        let subject = Self {
            subject_id: subject_id.into(),
            volumes,
            label,
            brain_mask,
        };
        subject.validate()?;
        Ok(subject)
    }

    pub fn validate(&self) -> Result<()> {
        if self.volumes.is_empty() {
            return Err(Error::contract("a subject needs at least one modality"));
        }
        let shape = self.label.shape();
        for v in self.volumes.iter().map(|v| v.shape()).chain([self.brain_mask.shape()]) {
            if v != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape.to_vec(),
                    actual: v.to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn modality_count(&self) -> usize {
        self.volumes.len()
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.label.shape();
        [s[0], s[1], s[2]]
    }

    /// Number of voxels with a nonzero label.
    pub fn foreground_count(&self) -> usize {
        self.label.iter().filter(|&&c| c != 0).count()
    }

    /// Largest label value present plus one.
    pub fn max_class(&self) -> usize {
        self.label.iter().copied().max().map_or(1, |c| c as usize + 1)
    }
}

/// Voxels that are nonzero in at least one modality.
pub fn nonzero_union(volumes: &[Array3<f32>]) -> Array3<bool> {
    let mut mask = Array3::from_elem(volumes[0].raw_dim(), false);
    for v in volumes {
        Zip::from(&mut mask).and(v).for_each(|m, &x| *m |= x != 0.0);
    }
    mask
}
