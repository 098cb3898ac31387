use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named union of label classes evaluated as one binary region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub name: String,
    pub class_ids: Vec<u8>,
}

impl RegionSpec {
    pub fn new(name: impl Into<String>, class_ids: Vec<u8>) -> Result<Self> {
        if class_ids.is_empty() || class_ids.contains(&0) {
            return Err(Error::config("class_ids", "need a non-empty set of foreground classes"));
        }
        Ok(Self {
            name: name.into(),
            class_ids,
        })
    }

    /// Whole tumor `{1, 2, 3}`, tumor core `{1, 3}`, enhancing tumor `{3}`.
    pub fn brats() -> Vec<Self> {
        vec![
            Self::new("complete", vec![1, 2, 3]).expect("non-empty"),
            Self::new("core", vec![1, 3]).expect("non-empty"),
            Self::new("enhancing", vec![3]).expect("non-empty"),
        ]
    }

    /// Every foreground class merged into one region.
    pub fn lesion(class_count: usize) -> Self {
        Self::new("lesion", (1..class_count.max(2) as u8).collect()).expect("non-empty")
    }

    /// BraTS regions for four classes, otherwise the single lesion region.
    pub fn defaults(class_count: usize) -> Vec<Self> {
        if class_count == 4 {
            Self::brats()
        } else {
            vec![Self::lesion(class_count)]
        }
    }

    pub fn contains(&self, class: u8) -> bool {
        self.class_ids.contains(&class)
    }

    pub fn binarize(&self, label: &Array3<u8>) -> Array3<bool> {
        label.mapv(|c| self.contains(c))
    }
}

/// `2 |P ∩ G| / (|P| + |G|)`; two empty sets score 1.
pub fn dice_score(pred: &Array3<bool>, gt: &Array3<bool>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            expected: gt.shape().to_vec(),
            actual: pred.shape().to_vec(),
        });
    }
    let (mut inter, mut total) = (0usize, 0usize);
    Zip::from(pred).and(gt).for_each(|&p, &g| {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    });
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Dice of one region between a predicted and a reference label volume.
pub fn region_dice(pred: &Array3<u8>, gt: &Array3<u8>, region: &RegionSpec) -> Result<f64> {
    dice_score(&region.binarize(pred), &region.binarize(gt))
}
