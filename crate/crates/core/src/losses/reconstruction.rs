use ndarray::{Array3, ArrayView3, Zip};

use crate::error::{Error, Result};

/// L1 reconstruction loss of one sample: per-modality voxel-mean absolute
/// error, summed over modalities. Callers average over the batch.
pub fn reconstruction_loss(recons: &[ArrayView3<f64>], targets: &[ArrayView3<f64>]) -> Result<f64> {
    check(recons, targets)?;
    Ok(recons
        .iter()
        .zip(targets)
        .map(|(r, x)| {
            let n = r.len() as f64;
            Zip::from(r).and(x).fold(0.0, |acc, a, b| acc + (a - b).abs()) / n
        })
        .sum())
}

/// [`reconstruction_loss`] with its (sub)gradient with respect to each
/// reconstruction. The subgradient at `r == x` is zero.
pub fn reconstruction_loss_grad(
    recons: &[ArrayView3<f64>],
    targets: &[ArrayView3<f64>],
) -> Result<(f64, Vec<Array3<f64>>)> {
    let loss = reconstruction_loss(recons, targets)?;
    let grads = recons
        .iter()
        .zip(targets)
        .map(|(r, x)| {
            let inv = 1.0 / r.len() as f64;
            Zip::from(r).and(x).map_collect(|a, b| {
                let d = a - b;
                if d > 0.0 {
                    inv
                } else if d < 0.0 {
                    -inv
                } else {
                    0.0
                }
            })
        })
        .collect();
    Ok((loss, grads))
}

fn check(recons: &[ArrayView3<f64>], targets: &[ArrayView3<f64>]) -> Result<()> {
    if recons.len() != targets.len() {
        return Err(Error::contract(format!(
            "{} reconstructions for {} targets",
            recons.len(),
            targets.len()
        )));
    }
    for (r, x) in recons.iter().zip(targets) {
        if r.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                expected: x.shape().to_vec(),
                actual: r.shape().to_vec(),
            });
        }
        if r.is_empty() {
            return Err(Error::contract("empty volume"));
        }
    }
    Ok(())
}
