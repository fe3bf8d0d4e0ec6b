//! Convolution kernels behind [`Tape::conv2d`](super::Tape::conv2d).
//!
//! The forward pass lowers each batch item to an im2col matrix and runs a
//! single GEMM per item; the two backward passes (weight and input) are
//! GEMMs of the same size, so the whole op costs three matrix products.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use super::{Result, TensorError};

/// Resolved convolution geometry, captured by the backward closure.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvSpec {
    pub fn resolve(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<ConvSpec> {
        let [batch, cin, h, w] = super::rank4("conv2d input", input)?;
        let [cout, wcin, kh, kw] = super::rank4("conv2d weight", weight)?;
        if kh != kw {
            return Err(TensorError::Shape(format!(
                "conv2d: kernel must be square, got {kh}x{kw}"
            )));
        }
        if wcin != cin {
            return Err(TensorError::Shape(format!(
                "conv2d: input has {cin} channels but weight expects {wcin}"
            )));
        }
        if bias != [cout] {
            return Err(TensorError::Shape(format!(
                "conv2d: bias shape {bias:?} does not match {cout} output channels"
            )));
        }
        if stride == 0 {
            return Err(TensorError::Shape("conv2d: stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::Shape(format!(
                "conv2d: padded input {}x{} smaller than kernel {kh}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvSpec {
            batch,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.oh, self.ow]
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Column matrix for one batch item: rows are (ci, ky, kx) patch offsets,
/// columns are output positions in row-major order.
fn im2col(x: &[f64], s: &ConvSpec) -> Array2<f64> {
    let mut col = Array2::<f64>::zeros((s.patch_len(), s.positions()));
    {
        let buf = col.as_slice_mut().expect("freshly allocated is contiguous");
        for ci in 0..s.cin {
            let plane = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
            for ky in 0..s.k {
                for kx in 0..s.k {
                    let row = (ci * s.k + ky) * s.k + kx;
                    let out_row = &mut buf[row * s.positions()..(row + 1) * s.positions()];
                    for oy in 0..s.oh {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                        for ox in 0..s.ow {
                            let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                            if ix >= 0 && ix < s.w as isize {
                                out_row[oy * s.ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a column-space gradient back to input space.
fn col2im_add(dcol: &Array2<f64>, s: &ConvSpec, dx: &mut [f64]) {
    let buf = dcol.as_slice().expect("contiguous");
    for ci in 0..s.cin {
        let plane = &mut dx[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = (ci * s.k + ky) * s.k + kx;
                let src_row = &buf[row * s.positions()..(row + 1) * s.positions()];
                for oy in 0..s.oh {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for ox in 0..s.ow {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            plane[iy as usize * s.w + ix as usize] += src_row[oy * s.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output tensor and, when `keep_cols` is set, the per-item
/// im2col matrices needed by the weight gradient.
pub fn forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    s: &ConvSpec,
    keep_cols: bool,
) -> (Vec<f64>, Vec<Array2<f64>>) {
    let npos = s.positions();
    let mut out = vec![0.0; s.batch * s.cout * npos];
    let w_mat = ArrayView2::from_shape((s.cout, s.patch_len()), w).expect("weight layout");
    let mut cols = Vec::new();
    let item = s.cin * s.h * s.w;
    for n in 0..s.batch {
        let col = im2col(&x[n * item..(n + 1) * item], s);
        let out_slice = &mut out[n * s.cout * npos..(n + 1) * s.cout * npos];
        let mut out_mat = ArrayViewMut2::from_shape((s.cout, npos), out_slice).expect("layout");
        general_mat_mul(1.0, &w_mat, &col.view(), 0.0, &mut out_mat);
        for co in 0..s.cout {
            let row = &mut out_slice[co * npos..(co + 1) * npos];
            for v in row {
                *v += b[co];
            }
        }
        if keep_cols {
            cols.push(col);
        }
    }
    (out, cols)
}

pub fn bias_grad(g: &[f64], s: &ConvSpec) -> Vec<f64> {
    let npos = s.positions();
    let mut db = vec![0.0; s.cout];
    for n in 0..s.batch {
        for (co, acc) in db.iter_mut().enumerate() {
            let base = (n * s.cout + co) * npos;
            *acc += g[base..base + npos].iter().sum::<f64>();
        }
    }
    db
}

pub fn weight_grad(g: &[f64], cols: &[Array2<f64>], s: &ConvSpec) -> Vec<f64> {
    let npos = s.positions();
    let mut dw = vec![0.0; s.cout * s.patch_len()];
    let mut dw_mat =
        ArrayViewMut2::from_shape((s.cout, s.patch_len()), dw.as_mut_slice()).expect("layout");
    for (n, col) in cols.iter().enumerate() {
        let g_mat = ArrayView2::from_shape(
            (s.cout, npos),
            &g[n * s.cout * npos..(n + 1) * s.cout * npos],
        )
        .expect("layout");
        general_mat_mul(1.0, &g_mat, &col.t(), 1.0, &mut dw_mat);
    }
    dw
}

pub fn input_grad(g: &[f64], w: &[f64], s: &ConvSpec) -> Vec<f64> {
    let npos = s.positions();
    let item = s.cin * s.h * s.w;
    let mut dx = vec![0.0; s.batch * item];
    let w_mat = ArrayView2::from_shape((s.cout, s.patch_len()), w).expect("layout");
    let mut dcol = Array2::<f64>::zeros((s.patch_len(), npos));
    for n in 0..s.batch {
        let g_mat = ArrayView2::from_shape(
            (s.cout, npos),
            &g[n * s.cout * npos..(n + 1) * s.cout * npos],
        )
        .expect("layout");
        general_mat_mul(1.0, &w_mat.t(), &g_mat, 0.0, &mut dcol.view_mut());
        col2im_add(&dcol, s, &mut dx[n * item..(n + 1) * item]);
    }
    dx
}
