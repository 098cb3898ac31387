//! Direct 3×3×3 convolution, padding 1, stride 1.
//!
//! Inputs are copied into a zero halo of one voxel. Output voxel `(z, y, x)`
//! is computed at pitched position `q = (z·Hp + y)·Wp + x` of the padded
//! grid, where tap `(kz, ky, kx)` reads padded index `q + (kz·Hp + ky)·Wp + kx`.
//! Every (output, input) channel pair is therefore one contiguous loop over
//! `q`; the few positions that fall on the halo are computed and discarded.

use super::ConvGeometry;

const LANES: usize = 16;

pub(super) fn applies(g: &ConvGeometry) -> bool {
    g.kernel == 3 && g.pad == 1 && g.stride == 1
}

/// Padded-grid geometry for an unpadded `(D, H, W)` volume.
#[derive(Clone, Copy)]
struct Grid {
    dims: [usize; 3],
    hp: usize,
    wp: usize,
    /// Padded voxels per channel.
    plane: usize,
    /// Pitched positions spanned by the interior.
    span: usize,
}

impl Grid {
    fn new(dims: [usize; 3]) -> Self {
        let [d, h, w] = dims;
        let (hp, wp) = (h + 2, w + 2);
        Self {
            dims,
            hp,
            wp,
            plane: (d + 2) * hp * wp,
            span: ((d - 1) * hp + h - 1) * wp + w,
        }
    }

    /// Pitched offset of each `(kz, ky)` tap row.
    fn offsets(&self) -> [usize; 9] {
        std::array::from_fn(|t| ((t / 3) * self.hp + t % 3) * self.wp)
    }

    /// Copies `(C, D, H, W)` into the interior of a zeroed padded buffer.
    fn pad(&self, x: &[f32], channels: usize) -> Vec<f32> {
        let [d, h, w] = self.dims;
        let mut out = vec![0.0f32; channels * self.plane];
        for c in 0..channels {
            for z in 0..d {
                for y in 0..h {
                    let src = &x[((c * d + z) * h + y) * w..][..w];
                    let dst = c * self.plane + ((z + 1) * self.hp + y + 1) * self.wp + 1;
                    out[dst..dst + w].copy_from_slice(src);
                }
            }
        }
        out
    }

    /// Copies `(C, D, H, W)` into pitched layout (`span` per channel) with
    /// zeros at halo positions.
    fn pitch(&self, x: &[f32], channels: usize) -> Vec<f32> {
        let [d, h, w] = self.dims;
        let mut out = vec![0.0f32; channels * self.span];
        for c in 0..channels {
            for z in 0..d {
                for y in 0..h {
                    let src = &x[((c * d + z) * h + y) * w..][..w];
                    let dst = c * self.span + (z * self.hp + y) * self.wp;
                    out[dst..dst + w].copy_from_slice(src);
                }
            }
        }
        out
    }

    /// Inverse of [`pitch`](Self::pitch), dropping halo positions.
    fn unpitch(&self, p: &[f32], channels: usize, out: &mut [f32]) {
        let [d, h, w] = self.dims;
        for c in 0..channels {
            for z in 0..d {
                for y in 0..h {
                    let src = c * self.span + (z * self.hp + y) * self.wp;
                    out[((c * d + z) * h + y) * w..][..w].copy_from_slice(&p[src..src + w]);
                }
            }
        }
    }
}

/// `acc[q] += Σ_t Σ_k w[3t + k] · x[off[t] + q + k]` for `q < acc.len()`.
#[inline(always)]
fn accumulate(acc: &mut [f32], x: &[f32], off: &[usize; 9], w: &[f32]) {
    let n = acc.len();
    let w: &[f32; 27] = w.try_into().expect("27 taps");
    let rows: [&[f32]; 9] = std::array::from_fn(|t| &x[off[t]..off[t] + n + 2]);
    for (t, row) in rows.iter().enumerate() {
        let (s0, s1, s2) = (&row[..n], &row[1..n + 1], &row[2..n + 2]);
        let (w0, w1, w2) = (w[3 * t], w[3 * t + 1], w[3 * t + 2]);
        for q in 0..n {
            acc[q] += w0 * s0[q] + w1 * s1[q] + w2 * s2[q];
        }
    }
}

/// `[Σ_q dy[q]·x[q], Σ_q dy[q]·x[q+1], Σ_q dy[q]·x[q+2]]` with fixed-order
/// lane-wise accumulation.
#[inline(always)]
fn correlate3(dy: &[f32], x: &[f32]) -> [f32; 3] {
    let n = dy.len();
    let (s0, s1, s2) = (&x[..n], &x[1..n + 1], &x[2..n + 2]);
    let mut acc = [[0.0f32; LANES]; 3];
    let full = n / LANES * LANES;
    for c in (0..full).step_by(LANES) {
        let d = &dy[c..c + LANES];
        let (a, b, e) = (&s0[c..c + LANES], &s1[c..c + LANES], &s2[c..c + LANES]);
        for l in 0..LANES {
            acc[0][l] += d[l] * a[l];
            acc[1][l] += d[l] * b[l];
            acc[2][l] += d[l] * e[l];
        }
    }
    let mut out = acc.map(|a| a.iter().sum::<f32>());
    for q in full..n {
        out[0] += dy[q] * s0[q];
        out[1] += dy[q] * s1[q];
        out[2] += dy[q] * s2[q];
    }
    out
}

/// Pitched forward pass over an already padded input.
fn forward_pitched(xp: &[f32], cin: usize, cout: usize, weight: &[f32], bias: &[f32], grid: &Grid) -> Vec<f32> {
    let off = grid.offsets();
    let mut out = vec![0.0f32; cout * grid.span];
    for (co, acc) in out.chunks_mut(grid.span).enumerate() {
        acc.fill(bias[co]);
        for ci in 0..cin {
            let w = &weight[(co * cin + ci) * 27..][..27];
            accumulate(acc, &xp[ci * grid.plane..(ci + 1) * grid.plane], &off, w);
        }
    }
    out
}

pub(super) fn forward_item(x: &[f32], weight: &[f32], bias: &[f32], g: &ConvGeometry, y: &mut [f32]) {
    let grid = Grid::new(g.input);
    let xp = grid.pad(x, g.cin);
    let out = forward_pitched(&xp, g.cin, g.cout, weight, bias, &grid);
    grid.unpitch(&out, g.cout, y);
}

pub(super) fn backward_item(
    x: &[f32],
    weight: &[f32],
    dy: &[f32],
    g: &ConvGeometry,
    need_dx: bool,
) -> (Vec<f32>, Vec<f32>, Option<Vec<f32>>) {
    let grid = Grid::new(g.input);
    let vo = g.out_voxels();
    let off = grid.offsets();
    let xp = grid.pad(x, g.cin);
    // Zeros at halo positions keep discarded outputs out of the sums.
    let dyp = grid.pitch(dy, g.cout);

    let mut dw = vec![0.0f32; g.cout * g.cin * 27];
    for co in 0..g.cout {
        let d = &dyp[co * grid.span..(co + 1) * grid.span];
        for ci in 0..g.cin {
            let xc = &xp[ci * grid.plane..(ci + 1) * grid.plane];
            for (t, &o) in off.iter().enumerate() {
                let r = correlate3(d, &xc[o..o + grid.span + 2]);
                dw[(co * g.cin + ci) * 27 + 3 * t..][..3].copy_from_slice(&r);
            }
        }
    }
    let db: Vec<f32> = dy.chunks(vo).map(|c| c.iter().sum()).collect();

    // dx correlates dy with the spatially flipped, transposed kernel.
    let dx = need_dx.then(|| {
        let mut flipped = vec![0.0f32; weight.len()];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                for k in 0..27 {
                    flipped[(ci * g.cout + co) * 27 + 26 - k] = weight[(co * g.cin + ci) * 27 + k];
                }
            }
        }
        let dypad = grid.pad(dy, g.cout);
        let out = forward_pitched(&dypad, g.cout, g.cin, &flipped, &vec![0.0; g.cin], &grid);
        let mut dx = vec![0.0f32; g.cin * g.in_voxels()];
        grid.unpitch(&out, g.cin, &mut dx);
        dx
    });
    (dw, db, dx)
}
