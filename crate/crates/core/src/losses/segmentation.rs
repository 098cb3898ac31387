//! Weighted cross-entropy and soft Dice over voxel-wise class logits.

use ndarray::{Array4, ArrayView3, ArrayView4, Axis, Zip};

use crate::error::{Error, Result};

/// Class logits, `(K, D, H, W)`.
pub type SegLogits = Array4<f64>;
/// Integer class map, `(D, H, W)`, entries in `[0, K)`.
pub type LabelVolume = ndarray::Array3<u8>;

/// Smoothing term of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;
/// Bounds applied to inverse-frequency class weights before renormalization.
pub const WEIGHT_CLIP: (f64, f64) = (1.0, 50.0);

fn check(logits: &ArrayView4<f64>, labels: &ArrayView3<u8>) -> Result<usize> {
    let k = logits.shape()[0];
    if k < 2 {
        return Err(Error::contract(format!("need at least 2 classes, got {k}")));
    }
    if logits.shape()[1..] != *labels.shape() {
        return Err(Error::ShapeMismatch {
            expected: logits.shape()[1..].to_vec(),
            actual: labels.shape().to_vec(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= k) {
        return Err(Error::InvalidLabel {
            value: bad as i64,
            context: format!("label volume for {k} classes"),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("logits contain non-finite values"));
    }
    Ok(k)
}

/// Per-voxel softmax over the class axis.
pub fn softmax_classes(logits: ArrayView4<f64>) -> Array4<f64> {
    let mut p = logits.to_owned();
    for mut lane in p.lanes_mut(Axis(0)) {
        let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        lane.mapv_inplace(|v| (v - max).exp());
        let s = lane.sum();
        lane.mapv_inplace(|v| v / s);
    }
    p
}

/// Mean over voxels of `w_y · (-log softmax(logits)_y)`.
pub fn weighted_cross_entropy(logits: ArrayView4<f64>, labels: ArrayView3<u8>, weights: &[f64]) -> Result<f64> {
    weighted_cross_entropy_grad(logits, labels, weights).map(|(l, _)| l)
}

/// [`weighted_cross_entropy`] with its gradient with respect to the logits.
pub fn weighted_cross_entropy_grad(
    logits: ArrayView4<f64>,
    labels: ArrayView3<u8>,
    weights: &[f64],
) -> Result<(f64, SegLogits)> {
    let k = check(&logits, &labels)?;
    if weights.len() != k {
        return Err(Error::contract(format!("{} class weights for {k} classes", weights.len())));
    }
    if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::contract("class weights must be positive"));
    }
    let voxels = labels.len() as f64;
    let mut grad = softmax_classes(logits);
    let mut total = 0.0;
    Zip::from(grad.lanes_mut(Axis(0)))
        .and(&labels)
        .and(logits.lanes(Axis(0)))
        .for_each(|mut p, &y, z| {
            let y = y as usize;
            let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let w = weights[y];
            total += w * (lse - z[y]);
            p[y] -= 1.0;
            p.mapv_inplace(|v| v * w / voxels);
        });
    Ok((total / voxels, grad))
}

/// Soft Dice loss averaged over the foreground classes `1..K`.
pub fn soft_dice_loss(logits: ArrayView4<f64>, labels: ArrayView3<u8>) -> Result<f64> {
    soft_dice_loss_grad(logits, labels).map(|(l, _)| l)
}

/// [`soft_dice_loss`] with its gradient with respect to the logits.
pub fn soft_dice_loss_grad(logits: ArrayView4<f64>, labels: ArrayView3<u8>) -> Result<(f64, SegLogits)> {
    let k = check(&logits, &labels)?;
    let probs = softmax_classes(logits);
    let fg = (k - 1) as f64;
    let mut d_probs = Array4::<f64>::zeros(probs.raw_dim());
    let mut loss = 0.0;
    for c in 1..k {
        let p = probs.index_axis(Axis(0), c);
        let (mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0);
        Zip::from(&p).and(&labels).for_each(|&pv, &y| {
            let g = if y as usize == c { 1.0 } else { 0.0 };
            inter += pv * g;
            psum += pv;
            gsum += g;
        });
        let num = 2.0 * inter + DICE_EPS;
        let den = psum + gsum + DICE_EPS;
        loss += 1.0 - num / den;
        let mut dp = d_probs.index_axis_mut(Axis(0), c);
        Zip::from(&mut dp).and(&labels).for_each(|d, &y| {
            let g = if y as usize == c { 1.0 } else { 0.0 };
            *d = -(2.0 * g * den - num) / (den * den) / fg;
        });
    }
    // Chain through the softmax: dz_c = p_c (dp_c - Σ_k dp_k p_k).
    let mut grad = Array4::<f64>::zeros(probs.raw_dim());
    Zip::from(grad.lanes_mut(Axis(0)))
        .and(probs.lanes(Axis(0)))
        .and(d_probs.lanes(Axis(0)))
        .for_each(|mut g, p, dp| {
            let dot: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
            for c in 0..g.len() {
                g[c] = p[c] * (dp[c] - dot);
            }
        });
    Ok((loss / fg, grad))
}

/// Inverse class-frequency weights over a batch of label volumes, clipped to
/// [`WEIGHT_CLIP`] and renormalized to mean one. Classes absent from the batch
/// get the upper clip value before renormalization.
pub fn inverse_frequency_weights<'a, I>(labels: I, classes: usize) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = ArrayView3<'a, u8>>,
{
    if classes < 2 {
        return Err(Error::contract("need at least 2 classes"));
    }
    let mut counts = vec![0u64; classes];
    for vol in labels {
        for &y in vol.iter() {
            let y = y as usize;
            if y >= classes {
                return Err(Error::InvalidLabel {
                    value: y as i64,
                    context: format!("weights for {classes} classes"),
                });
            }
            counts[y] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::contract("no voxels to compute class weights from"));
    }
    let (lo, hi) = WEIGHT_CLIP;
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if c == 0 {
                hi
            } else {
                (total as f64 / c as f64).clamp(lo, hi)
            }
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / classes as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}
