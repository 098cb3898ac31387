//! Separable trilinear 2x upsampling (half-pixel centers, edge clamped).

/// Upsamples the middle axis of an `(outer, n, inner)` block to `2n`.
fn up_axis(x: &[f32], outer: usize, n: usize, inner: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; outer * 2 * n * inner];
    for o in 0..outer {
        let src = &x[o * n * inner..(o + 1) * n * inner];
        let dst = &mut out[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        for i in 0..n {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            let (c, l, h) = (&src[i * inner..][..inner], &src[lo * inner..][..inner], &src[hi * inner..][..inner]);
            let (even, odd) = dst[2 * i * inner..(2 * i + 2) * inner].split_at_mut(inner);
            for k in 0..inner {
                even[k] = 0.75 * c[k] + 0.25 * l[k];
                odd[k] = 0.75 * c[k] + 0.25 * h[k];
            }
        }
    }
    out
}

/// Adjoint of [`up_axis`].
fn up_axis_adjoint(dy: &[f32], outer: usize, n: usize, inner: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; outer * n * inner];
    for o in 0..outer {
        let src = &dy[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        let dst = &mut dx[o * n * inner..(o + 1) * n * inner];
        for i in 0..n {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            let even = &src[2 * i * inner..][..inner];
            let odd = &src[(2 * i + 1) * inner..][..inner];
            for k in 0..inner {
                dst[i * inner + k] += 0.75 * (even[k] + odd[k]);
                dst[lo * inner + k] += 0.25 * even[k];
                dst[hi * inner + k] += 0.25 * odd[k];
            }
        }
    }
    dx
}

/// `(lanes, D, H, W)` to `(lanes, 2D, 2H, 2W)`.
pub fn upsample2x_forward(x: &[f32], lanes: usize, dims: [usize; 3]) -> Vec<f32> {
    let [d, h, w] = dims;
    let a = up_axis(x, lanes * d * h, w, 1);
    let b = up_axis(&a, lanes * d, h, 2 * w);
    up_axis(&b, lanes, d, 4 * h * w)
}

pub fn upsample2x_backward(dy: &[f32], lanes: usize, dims: [usize; 3]) -> Vec<f32> {
    let [d, h, w] = dims;
    let b = up_axis_adjoint(dy, lanes, d, 4 * h * w);
    let a = up_axis_adjoint(&b, lanes * d, h, 2 * w);
    up_axis_adjoint(&a, lanes * d * h, w, 1)
}
