//! 3D convolution. Pointwise and generic kernels use im2col with GEMM;
//! 3×3×3 kernels use a direct row kernel over a zero-padded copy of the
//! input, which avoids materializing the 27× column matrix.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::par;

mod direct;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, input: [usize; 3]) -> Self {
        let pad = kernel / 2;
        let output = input.map(|n| (n + 2 * pad - kernel) / stride + 1);
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            input,
            output,
        }
    }

    pub fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    /// Rows of the unfolded input, `cin · k³`.
    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }
}

/// Unfolds one batch item `(cin, D, H, W)` into `(cin·k³, out_voxels)`.
fn im2col(x: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.kernel;
    let vo = od * oh * ow;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * vo..(row + 1) * vo];
                    for oz in 0..od {
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        for oy in 0..oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let out_row = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                out_row.fill(0.0);
                                continue;
                            }
                            let src = &xc[(iz as usize * h + iy as usize) * w..][..w];
                            for (ox, o) in out_row.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                *o = if ix >= 0 && ix < w as isize {
                                    src[ix as usize]
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `(cin·k³, out_voxels)` back onto the input.
fn col2im(cols: &[f32], g: &ConvGeometry, dx: &mut [f32]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.kernel;
    let vo = od * oh * ow;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &cols[row * vo..(row + 1) * vo];
                    for oz in 0..od {
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = &mut xc[(iz as usize * h + iy as usize) * w..][..w];
                            let col_row = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            for (ox, &v) in col_row.iter().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    in_row[ix as usize] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn view2(data: &[f32], rows: usize, cols: usize) -> ArrayView2<'_, f32> {
    ArrayView2::from_shape((rows, cols), data).expect("contiguous matrix")
}

fn view2_mut(data: &mut [f32], rows: usize, cols: usize) -> ArrayViewMut2<'_, f32> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("contiguous matrix")
}

fn unfold<'a>(x_item: &'a [f32], g: &ConvGeometry) -> std::borrow::Cow<'a, [f32]> {
    if g.is_pointwise() {
        std::borrow::Cow::Borrowed(x_item)
    } else {
        let mut cols = vec![0.0; g.patch_len() * g.out_voxels()];
        im2col(x_item, g, &mut cols);
        std::borrow::Cow::Owned(cols)
    }
}

fn gemm_forward_item(x_item: &[f32], w: &ArrayView2<f32>, bias: &[f32], g: &ConvGeometry, y: &mut [f32]) {
    let (vo, kl) = (g.out_voxels(), g.patch_len());
    let cols = unfold(x_item, g);
    for (co, row) in y.chunks_mut(vo).enumerate() {
        row.fill(bias[co]);
    }
    general_mat_mul(1.0, w, &view2(&cols, kl, vo), 1.0, &mut view2_mut(y, g.cout, vo));
}

/// Forward convolution of a batch `(B, cin, D, H, W)` with weights
/// `(cout, cin, k, k, k)` and bias `(cout)`.
pub fn conv3d_forward(x: &[f32], batch: usize, weight: &[f32], bias: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (vi, vo, kl) = (g.in_voxels(), g.out_voxels(), g.patch_len());
    debug_assert_eq!(x.len(), batch * g.cin * vi);
    let mut out = vec![0.0f32; batch * g.cout * vo];
    let w = view2(weight, g.cout, kl);
    par::for_each_chunk_mut(&mut out, g.cout * vo, |b, y| {
        let xb = &x[b * g.cin * vi..(b + 1) * g.cin * vi];
        if direct::applies(g) {
            direct::forward_item(xb, weight, bias, g, y);
        } else {
            gemm_forward_item(xb, &w, bias, g, y);
        }
    });
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

type ItemGrads = (Vec<f32>, Vec<f32>, Option<Vec<f32>>);

fn gemm_backward_item(xb: &[f32], w: &ArrayView2<f32>, dyb: &[f32], g: &ConvGeometry, need_dx: bool) -> ItemGrads {
    let (vi, vo, kl) = (g.in_voxels(), g.out_voxels(), g.patch_len());
    let dyb = view2(dyb, g.cout, vo);
    let cols = unfold(xb, g);
    let mut dw = vec![0.0f32; g.cout * kl];
    general_mat_mul(1.0, &dyb, &view2(&cols, kl, vo).t(), 0.0, &mut view2_mut(&mut dw, g.cout, kl));
    let db: Vec<f32> = dyb.rows().into_iter().map(|r| r.sum()).collect();
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0f32; kl * vo];
        general_mat_mul(1.0, &w.t(), &dyb, 0.0, &mut view2_mut(&mut dcols, kl, vo));
        if g.is_pointwise() {
            dcols
        } else {
            let mut dxb = vec![0.0f32; g.cin * vi];
            col2im(&dcols, g, &mut dxb);
            dxb
        }
    });
    (dw, db, dx)
}

/// Backward convolution. `need_dx` skips the input gradient for leaf inputs.
pub fn conv3d_backward(
    x: &[f32],
    batch: usize,
    weight: &[f32],
    dy: &[f32],
    g: &ConvGeometry,
    need_dx: bool,
) -> ConvGrads {
    let (vi, vo, kl) = (g.in_voxels(), g.out_voxels(), g.patch_len());
    let w = view2(weight, g.cout, kl);
    let per_item = par::map_range(batch, |b| {
        let xb = &x[b * g.cin * vi..(b + 1) * g.cin * vi];
        let dyb = &dy[b * g.cout * vo..(b + 1) * g.cout * vo];
        if direct::applies(g) {
            direct::backward_item(xb, weight, dyb, g, need_dx)
        } else {
            gemm_backward_item(xb, &w, dyb, g, need_dx)
        }
    });

    // Reduce in item order so the result does not depend on scheduling.
    let mut dw = vec![0.0f32; g.cout * kl];
    let mut db = vec![0.0f32; g.cout];
    let mut dx = need_dx.then(|| Vec::with_capacity(batch * g.cin * vi));
    for (dwb, dbb, dxb) in per_item {
        dw.iter_mut().zip(&dwb).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&dbb).for_each(|(a, b)| *a += b);
        if let (Some(dx), Some(dxb)) = (dx.as_mut(), dxb) {
            dx.extend_from_slice(&dxb);
        }
    }
    ConvGrads { dx, dw, db }
}
