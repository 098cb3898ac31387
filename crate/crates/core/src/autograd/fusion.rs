//! Availability-masked gated fusion.
//!
//! For each item, a per-modality pointwise gate scores every voxel, scores
//! are softmax-normalized over the available modalities only, and the output
//! is the weighted sum of the available maps. Masked-out maps are never read.

pub struct FusionForward {
    pub out: Vec<f32>,
    /// Per item: softmax weights for each available modality, `(avail, S)`.
    pub weights: Vec<Vec<f32>>,
}

/// `anat[j]` is `(B, C, S)`; `gate_w` is `(M, C)`; `gate_b` is `(M)`.
/// Every mask row must have at least one available modality.
pub fn fusion_forward(
    anat: &[&[f32]],
    batch: usize,
    channels: usize,
    spatial: usize,
    gate_w: &[f32],
    gate_b: &[f32],
    masks: &[Vec<bool>],
) -> FusionForward {
    let item = channels * spatial;
    let mut out = vec![0.0f32; batch * item];
    let mut all_weights = Vec::with_capacity(batch);
    for b in 0..batch {
        let avail: Vec<usize> = (0..anat.len()).filter(|&j| masks[b][j]).collect();
        assert!(!avail.is_empty(), "fusion called with an empty mask");
        let mut weights = vec![0.0f32; avail.len() * spatial];
        for (slot, &j) in avail.iter().enumerate() {
            let a = &anat[j][b * item..(b + 1) * item];
            let s = &mut weights[slot * spatial..(slot + 1) * spatial];
            s.fill(gate_b[j]);
            for c in 0..channels {
                let wc = gate_w[j * channels + c];
                for (sv, av) in s.iter_mut().zip(&a[c * spatial..(c + 1) * spatial]) {
                    *sv += wc * av;
                }
            }
        }
        for v in 0..spatial {
            let max = (0..avail.len()).map(|s| weights[s * spatial + v]).fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f32;
            for s in 0..avail.len() {
                let e = (weights[s * spatial + v] - max).exp();
                weights[s * spatial + v] = e;
                total += e;
            }
            for s in 0..avail.len() {
                weights[s * spatial + v] /= total;
            }
        }
        let o = &mut out[b * item..(b + 1) * item];
        for (slot, &j) in avail.iter().enumerate() {
            let a = &anat[j][b * item..(b + 1) * item];
            let w = &weights[slot * spatial..(slot + 1) * spatial];
            for c in 0..channels {
                let oc = &mut o[c * spatial..(c + 1) * spatial];
                let ac = &a[c * spatial..(c + 1) * spatial];
                for v in 0..spatial {
                    oc[v] += w[v] * ac[v];
                }
            }
        }
        all_weights.push(weights);
    }
    FusionForward {
        out,
        weights: all_weights,
    }
}

pub struct FusionGrads {
    /// `(B, C, S)` per modality; entries of masked items stay zero.
    pub d_anat: Vec<Vec<f32>>,
    pub d_gate_w: Vec<f32>,
    pub d_gate_b: Vec<f32>,
}

#[allow(clippy::too_many_arguments)]
pub fn fusion_backward(
    dy: &[f32],
    anat: &[&[f32]],
    batch: usize,
    channels: usize,
    spatial: usize,
    gate_w: &[f32],
    masks: &[Vec<bool>],
    weights: &[Vec<f32>],
) -> FusionGrads {
    let m = anat.len();
    let item = channels * spatial;
    let mut d_anat = vec![vec![0.0f32; batch * item]; m];
    let mut d_gate_w = vec![0.0f32; m * channels];
    let mut d_gate_b = vec![0.0f32; m];
    for b in 0..batch {
        let avail: Vec<usize> = (0..m).filter(|&j| masks[b][j]).collect();
        let w = &weights[b];
        let g = &dy[b * item..(b + 1) * item];
        // dL/dw_j(v) = Σ_c g[c, v] a_j[c, v]
        let mut dw = vec![0.0f32; avail.len() * spatial];
        for (slot, &j) in avail.iter().enumerate() {
            let a = &anat[j][b * item..(b + 1) * item];
            let dws = &mut dw[slot * spatial..(slot + 1) * spatial];
            for c in 0..channels {
                for v in 0..spatial {
                    dws[v] += g[c * spatial + v] * a[c * spatial + v];
                }
            }
        }
        // Softmax backward: ds_j = w_j (dw_j - Σ_k w_k dw_k)
        let mut ds = vec![0.0f32; avail.len() * spatial];
        for v in 0..spatial {
            let dot: f32 = (0..avail.len()).map(|s| w[s * spatial + v] * dw[s * spatial + v]).sum();
            for s in 0..avail.len() {
                ds[s * spatial + v] = w[s * spatial + v] * (dw[s * spatial + v] - dot);
            }
        }
        for (slot, &j) in avail.iter().enumerate() {
            let a = &anat[j][b * item..(b + 1) * item];
            let da = &mut d_anat[j][b * item..(b + 1) * item];
            let ws = &w[slot * spatial..(slot + 1) * spatial];
            let dss = &ds[slot * spatial..(slot + 1) * spatial];
            d_gate_b[j] += dss.iter().sum::<f32>();
            for c in 0..channels {
                let wc = gate_w[j * channels + c];
                let mut acc = 0.0f32;
                for v in 0..spatial {
                    let idx = c * spatial + v;
                    da[idx] = ws[v] * g[idx] + wc * dss[v];
                    acc += dss[v] * a[idx];
                }
                d_gate_w[j * channels + c] += acc;
            }
        }
    }
    FusionGrads {
        d_anat,
        d_gate_w,
        d_gate_b,
    }
}
