//! Channel-wise structural similarity over 3D feature maps.
//!
//! Statistics are global per channel: one mean, variance and covariance over
//! all voxels of the channel, no sliding window.

use ndarray::{Array4, ArrayView4, Axis};

use crate::error::{Error, Result};

/// First stabilizing constant (luminance term).
pub const DEFAULT_C1: f64 = 1e-4;
/// Second stabilizing constant (contrast/structure term).
pub const DEFAULT_C2: f64 = 9e-4;

fn check_pair(a: &ArrayView4<f64>, b: &ArrayView4<f64>, c1: f64, c2: f64) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    if a.is_empty() {
        return Err(Error::contract("SSIM of an empty feature map"));
    }
    if !(c1 > 0.0 && c2 > 0.0) {
        return Err(Error::contract(format!(
            "SSIM constants must be positive (c1={c1}, c2={c2})"
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::contract("SSIM input contains non-finite values"));
    }
    Ok(())
}

struct ChannelTerms {
    mu_a: f64,
    mu_b: f64,
    lum_num: f64,
    cs_num: f64,
    lum_den: f64,
    cs_den: f64,
}

impl ChannelTerms {
    fn new(a: &[f64], b: &[f64], c1: f64, c2: f64) -> Self {
        let n = a.len() as f64;
        let mu_a = a.iter().sum::<f64>() / n;
        let mu_b = b.iter().sum::<f64>() / n;
        // var and cov share one expression so that ssim(x, x) == 1 bit-exactly.
        let moment = |x: &[f64], mx: f64, y: &[f64], my: f64| {
            x.iter()
                .zip(y)
                .map(|(&xi, &yi)| (xi - mx) * (yi - my))
                .sum::<f64>()
                / n
        };
        let var_a = moment(a, mu_a, a, mu_a);
        let var_b = moment(b, mu_b, b, mu_b);
        let cov = moment(a, mu_a, b, mu_b);
        Self {
            mu_a,
            mu_b,
            lum_num: 2.0 * mu_a * mu_b + c1,
            cs_num: 2.0 * cov + c2,
            lum_den: mu_a * mu_a + mu_b * mu_b + c1,
            cs_den: var_a + var_b + c2,
        }
    }

    fn value(&self) -> f64 {
        (self.lum_num * self.cs_num) / (self.lum_den * self.cs_den)
    }
}

fn channel_vectors(x: &ArrayView4<f64>) -> Vec<Vec<f64>> {
    x.axis_iter(Axis(0)).map(|ch| ch.iter().copied().collect()).collect()
}

/// Mean over channels of the global structural similarity between `a` and `b`.
///
/// Both maps are `(C, D, H, W)`. The result lies in `[-1, 1]` up to rounding
/// and is exactly `1.0` when `a` and `b` are identical.
pub fn ssim_channel_mean(a: ArrayView4<f64>, b: ArrayView4<f64>, c1: f64, c2: f64) -> Result<f64> {
    check_pair(&a, &b, c1, c2)?;
    let (ca, cb) = (channel_vectors(&a), channel_vectors(&b));
    let total: f64 = ca
        .iter()
        .zip(&cb)
        .map(|(x, y)| ChannelTerms::new(x, y, c1, c2).value())
        .sum();
    Ok(total / ca.len() as f64)
}

/// [`ssim_channel_mean`] together with its gradient with respect to both inputs.
pub fn ssim_channel_mean_grad(
    a: ArrayView4<f64>,
    b: ArrayView4<f64>,
    c1: f64,
    c2: f64,
) -> Result<(f64, Array4<f64>, Array4<f64>)> {
    check_pair(&a, &b, c1, c2)?;
    let channels = a.shape()[0];
    let (ca, cb) = (channel_vectors(&a), channel_vectors(&b));
    let mut grad_a = Array4::<f64>::zeros(a.raw_dim());
    let mut grad_b = Array4::<f64>::zeros(b.raw_dim());
    let inv_c = 1.0 / channels as f64;
    let mut total = 0.0;

    for (c, (x, y)) in ca.iter().zip(&cb).enumerate() {
        let t = ChannelTerms::new(x, y, c1, c2);
        total += t.value();
        let n = x.len() as f64;
        let den = t.lum_den * t.cs_den;
        // Partials of S = (A B) / (C D) with respect to A, B, C, D.
        let d_lum_num = t.cs_num / den;
        let d_cs_num = t.lum_num / den;
        let d_lum_den = -t.lum_num * t.cs_num / (t.lum_den * den);
        let d_cs_den = -t.lum_num * t.cs_num / (t.cs_den * den);

        let mut ga = grad_a.index_axis_mut(Axis(0), c);
        let mut gb = grad_b.index_axis_mut(Axis(0), c);
        for ((k, ga_k), gb_k) in ga.iter_mut().enumerate().zip(gb.iter_mut()) {
            let (dx, dy) = (x[k] - t.mu_a, y[k] - t.mu_b);
            *ga_k = inv_c
                * (d_lum_num * 2.0 * t.mu_b / n
                    + d_cs_num * 2.0 * dy / n
                    + d_lum_den * 2.0 * t.mu_a / n
                    + d_cs_den * 2.0 * dx / n);
            *gb_k = inv_c
                * (d_lum_num * 2.0 * t.mu_a / n
                    + d_cs_num * 2.0 * dx / n
                    + d_lum_den * 2.0 * t.mu_b / n
                    + d_cs_den * 2.0 * dy / n);
        }
    }
    Ok((total * inv_c, grad_a, grad_b))
}
