use ndarray::{s, Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MultimodalVolume;
use crate::error::{Error, Result};

/// Random flips, a cubic crop and per-modality affine intensity jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Flip probability per spatial axis.
    pub flip_prob: [f64; 3],
    pub crop_size: usize,
    /// Inclusive range of the additive shift, in normalized intensity units.
    pub intensity_shift: [f64; 2],
    /// Inclusive range of the multiplicative scale.
    pub intensity_scale: [f64; 2],
    /// Probability that a crop is forced to contain a foreground voxel.
    pub foreground_crop_prob: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_prob: [0.5; 3],
            crop_size: 16,
            intensity_shift: [-0.1, 0.1],
            intensity_scale: [0.9, 1.1],
            foreground_crop_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// No flips and no intensity jitter; only the crop remains random.
    pub fn crop_only(crop_size: usize, seed: u64) -> Self {
        Self {
            flip_prob: [0.0; 3],
            crop_size,
            intensity_shift: [0.0, 0.0],
            intensity_scale: [1.0, 1.0],
            foreground_crop_prob: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !self.flip_prob.iter().all(|&p| prob(p)) {
            return Err(Error::config("flip_prob", "probabilities must lie in [0, 1]"));
        }
        if !prob(self.foreground_crop_prob) {
            return Err(Error::config("foreground_crop_prob", "must lie in [0, 1]"));
        }
        if self.crop_size == 0 {
            return Err(Error::config("crop_size", "must be positive"));
        }
        let [a, b] = self.intensity_shift;
        if !(a.is_finite() && b.is_finite() && a <= b) {
            return Err(Error::config("intensity_shift", "need finite low <= high"));
        }
        let [a, b] = self.intensity_scale;
        if !(a.is_finite() && b.is_finite() && 0.0 < a && a <= b) {
            return Err(Error::config("intensity_scale", "need 0 < low <= high"));
        }
        Ok(())
    }
}

/// [`augment_with_rng`] driven by a fresh generator seeded from `cfg.seed`.
pub fn augment(subject: &MultimodalVolume, cfg: &AugmentationConfig) -> Result<MultimodalVolume> {
    augment_with_rng(subject, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Applies one spatial transform to every volume, the label and the mask, then
/// jitters each modality's in-brain intensities independently.
///
/// Spatial draws precede intensity draws, so the spatial transform does not
/// depend on the number of modalities.
pub fn augment_with_rng<R: Rng + ?Sized>(
    subject: &MultimodalVolume,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<MultimodalVolume> {
    cfg.validate()?;
    let shape = subject.shape();
    let c = cfg.crop_size;
    if shape.iter().any(|&n| n < c) {
        return Err(Error::CropTooLarge { crop: c, shape });
    }

    let anchor = if rng.gen_bool(cfg.foreground_crop_prob) {
        random_foreground(&subject.label, rng)
    } else {
        None
    };
    let origin: [usize; 3] = std::array::from_fn(|d| {
        let (lo, hi) = match anchor {
            Some(v) => (v[d].saturating_sub(c - 1), v[d].min(shape[d] - c)),
            None => (0, shape[d] - c),
        };
        rng.gen_range(lo..=hi)
    });
    let flips: [bool; 3] = std::array::from_fn(|d| rng.gen_bool(cfg.flip_prob[d]));

    fn spatial<T: Clone>(a: &Array3<T>, o: [usize; 3], c: usize, flips: [bool; 3]) -> Array3<T> {
        let mut v = a.slice(s![o[0]..o[0] + c, o[1]..o[1] + c, o[2]..o[2] + c]);
        for (d, &f) in flips.iter().enumerate() {
            if f {
                v.invert_axis(Axis(d));
            }
        }
        v.to_owned()
    }

    let label = spatial(&subject.label, origin, c, flips);
    let brain_mask = spatial(&subject.brain_mask, origin, c, flips);
    let mut volumes = Vec::with_capacity(subject.volumes.len());
    for v in &subject.volumes {
        let mut out = spatial(v, origin, c, flips);
        let shift = rng.gen_range(cfg.intensity_shift[0]..=cfg.intensity_shift[1]);
        let scale = rng.gen_range(cfg.intensity_scale[0]..=cfg.intensity_scale[1]);
        Zip::from(&mut out).and(&brain_mask).for_each(|x, &m| {
            if m {
                *x = (*x as f64 * scale + shift) as f32;
            }
        });
        volumes.push(out);
    }
    MultimodalVolume::new(subject.subject_id.clone(), volumes, label, brain_mask)
}

fn random_foreground<R: Rng + ?Sized>(label: &Array3<u8>, rng: &mut R) -> Option<[usize; 3]> {
    let count = label.iter().filter(|&&c| c != 0).count();
    if count == 0 {
        return None;
    }
    let pick = rng.gen_range(0..count);
    label
        .indexed_iter()
        .filter(|(_, &c)| c != 0)
        .nth(pick)
        .map(|((i, j, k), _)| [i, j, k])
}
