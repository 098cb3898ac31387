//! Instance normalization over the spatial extent of each (item, channel).

pub const EPS: f32 = 1e-5;

pub struct NormForward {
    pub out: Vec<f32>,
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

/// `x` is `(B, C, S)` flattened; `gamma`/`beta` are `(C)`.
pub fn instance_norm_forward(x: &[f32], channels: usize, spatial: usize, gamma: &[f32], beta: &[f32]) -> NormForward {
    let lanes = x.len() / spatial;
    let mut xhat = vec![0.0f32; x.len()];
    let mut out = vec![0.0f32; x.len()];
    let mut inv_std = vec![0.0f32; lanes];
    for lane in 0..lanes {
        let c = lane % channels;
        let src = &x[lane * spatial..(lane + 1) * spatial];
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / spatial as f64;
        let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / spatial as f64;
        let is = (1.0 / (var + EPS as f64).sqrt()) as f32;
        inv_std[lane] = is;
        let xh = &mut xhat[lane * spatial..(lane + 1) * spatial];
        let o = &mut out[lane * spatial..(lane + 1) * spatial];
        for i in 0..spatial {
            xh[i] = (src[i] - mean as f32) * is;
            o[i] = gamma[c] * xh[i] + beta[c];
        }
    }
    NormForward { out, xhat, inv_std }
}

pub struct NormGrads {
    pub dx: Vec<f32>,
    pub dgamma: Vec<f32>,
    pub dbeta: Vec<f32>,
}

pub fn instance_norm_backward(
    dy: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    channels: usize,
    spatial: usize,
    gamma: &[f32],
) -> NormGrads {
    let lanes = dy.len() / spatial;
    let mut dx = vec![0.0f32; dy.len()];
    let mut dgamma = vec![0.0f32; channels];
    let mut dbeta = vec![0.0f32; channels];
    let n = spatial as f32;
    for lane in 0..lanes {
        let c = lane % channels;
        let g = &dy[lane * spatial..(lane + 1) * spatial];
        let xh = &xhat[lane * spatial..(lane + 1) * spatial];
        let (mut sum_g, mut sum_gx) = (0.0f32, 0.0f32);
        for i in 0..spatial {
            sum_g += g[i];
            sum_gx += g[i] * xh[i];
        }
        dgamma[c] += sum_gx;
        dbeta[c] += sum_g;
        // dxhat = g · gamma
        let (mean_d, mean_dx) = (gamma[c] * sum_g / n, gamma[c] * sum_gx / n);
        let d = &mut dx[lane * spatial..(lane + 1) * spatial];
        for i in 0..spatial {
            d[i] = inv_std[lane] * (gamma[c] * g[i] - mean_d - xh[i] * mean_dx);
        }
    }
    NormGrads { dx, dgamma, dbeta }
}
