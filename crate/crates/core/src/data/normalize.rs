use ndarray::{Array3, Zip};

use crate::error::{Error, Result};

/// In-mask standard deviations below this are treated as a constant signal.
pub const STD_FLOOR: f64 = 1e-6;

/// Z-scores `volume` over the voxels where `mask` is set and zeroes the rest.
///
/// Statistics are accumulated in `f64` with a two-pass mean and variance.
pub fn normalize_in_mask(volume: &Array3<f32>, mask: &Array3<bool>) -> Result<Array3<f32>> {
    if volume.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            expected: volume.shape().to_vec(),
            actual: mask.shape().to_vec(),
        });
    }
    let mut n = 0usize;
    let mut sum = 0.0f64;
    Zip::from(volume).and(mask).for_each(|&v, &m| {
        if m {
            n += 1;
            sum += v as f64;
        }
    });
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mean = sum / n as f64;
    let mut ss = 0.0f64;
    Zip::from(volume).and(mask).for_each(|&v, &m| {
        if m {
            ss += (v as f64 - mean).powi(2);
        }
    });
    let std = (ss / n as f64).sqrt();
    let mut out = Array3::<f32>::zeros(volume.raw_dim());
    if std < STD_FLOOR {
        return Ok(out);
    }
    Zip::from(&mut out).and(volume).and(mask).for_each(|o, &v, &m| {
        if m {
            *o = ((v as f64 - mean) / std) as f32;
        }
    });
    Ok(out)
}
