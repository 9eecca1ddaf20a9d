//! Convolution, pooling and resampling kernels used by the graph ops.
//! Convolution goes through im2col so the inner loop is a single GEMM.

use ndarray::{Array1, Array2, Array3, ArrayD, Ix1, Ix2, Ix3, IxDyn};

use super::{PadMode, Scalar};

pub(crate) fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Source coordinate for a padded read, or None when a zero pad cell is hit.
#[inline]
fn src_coord(idx: isize, len: usize, pad_mode: PadMode) -> Option<usize> {
    if idx >= 0 && (idx as usize) < len {
        Some(idx as usize)
    } else {
        match pad_mode {
            PadMode::Zero => None,
            PadMode::Replicate => Some(idx.clamp(0, len as isize - 1) as usize),
        }
    }
}

fn im2col<F: Scalar>(
    x: &Array3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    pad_mode: PadMode,
) -> Array2<F> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<F>::zeros((cin * kh * kw, oh * ow));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let mut out_row = cols.row_mut(row);
                for oy in 0..oh {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    let sy = src_coord(sy, h, pad_mode);
                    for ox in 0..ow {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        let v = match (sy, src_coord(sx, w, pad_mode)) {
                            (Some(y), Some(xc)) => x[(ci, y, xc)],
                            _ => F::zero(),
                        };
                        out_row[oy * ow + ox] = v;
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(
    dcols: &Array2<F>,
    shape: (usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    pad_mode: PadMode,
) -> Array3<F> {
    let (cin, h, w) = shape;
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut dx = Array3::<F>::zeros((cin, h, w));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src_row = dcols.row(row);
                for oy in 0..oh {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    let sy = match src_coord(sy, h, pad_mode) {
                        Some(v) => v,
                        None => continue,
                    };
                    for ox in 0..ow {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if let Some(sx) = src_coord(sx, w, pad_mode) {
                            dx[(ci, sy, sx)] += src_row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Returns the convolution output `(Cout, OH, OW)` and the im2col buffer kept
/// for the backward pass.
pub(crate) fn conv2d_forward<F: Scalar>(
    x: &Array3<F>,
    w: &ArrayD<F>,
    b: &Array1<F>,
    stride: usize,
    pad: usize,
    pad_mode: PadMode,
) -> (Array3<F>, Array2<F>) {
    let wv = w.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let (cout, cin, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    assert_eq!(cin, x.shape()[0], "conv2d input channels");
    let oh = conv_out_len(x.shape()[1], kh, stride, pad);
    let ow = conv_out_len(x.shape()[2], kw, stride, pad);

    let cols = im2col(x, kh, kw, stride, pad, pad_mode);
    let w_mat = wv
        .to_shape((cout, cin * kh * kw))
        .expect("conv weights are contiguous")
        .to_owned();
    let mut y_mat = w_mat.dot(&cols);
    for (mut row, &bias) in y_mat.rows_mut().into_iter().zip(b.iter()) {
        row.mapv_inplace(|v| v + bias);
    }
    let y = y_mat
        .into_shape((cout, oh, ow))
        .expect("gemm output reshapes to conv output");
    (y, cols)
}

pub(crate) fn conv2d_backward<F: Scalar>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    grad: &ArrayD<F>,
    stride: usize,
    pad: usize,
    pad_mode: PadMode,
    cols: &Array2<F>,
) -> (ArrayD<F>, ArrayD<F>, ArrayD<F>) {
    let xv = x.view().into_dimensionality::<Ix3>().unwrap();
    let wv = w.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let g = grad.view().into_dimensionality::<Ix3>().unwrap();
    let (cout, cin, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);

    let g_mat = g
        .to_shape((cout, oh * ow))
        .expect("grad is contiguous")
        .to_owned();
    let db = g_mat.sum_axis(ndarray::Axis(1));
    let dw_mat = g_mat.dot(&cols.t());
    let dw = dw_mat
        .into_shape((cout, cin, kh, kw))
        .expect("dw reshapes to kernel shape");
    let w_mat = wv
        .to_shape((cout, cin * kh * kw))
        .expect("conv weights are contiguous")
        .to_owned();
    let dcols = w_mat.t().dot(&g_mat);
    let dx = col2im(
        &dcols,
        (xv.shape()[0], xv.shape()[1], xv.shape()[2]),
        kh,
        kw,
        stride,
        pad,
        pad_mode,
    );
    (dx.into_dyn(), dw.into_dyn(), db.into_dyn())
}

/// Count-normalized 2x2 average pooling with ceil output extents.
pub(crate) fn avg_pool2_forward<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = ((h + 1) / 2, (w + 1) / 2);
    let mut out = Array3::<F>::zeros((c, oh, ow));
    for ci in 0..c {
        for y in 0..oh {
            for xi in 0..ow {
                let mut acc = F::zero();
                let mut count = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (sy, sx) = (2 * y + dy, 2 * xi + dx);
                        if sy < h && sx < w {
                            acc += x[(ci, sy, sx)];
                            count += 1;
                        }
                    }
                }
                out[(ci, y, xi)] = acc / F::from_usize(count).unwrap();
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<F: Scalar>(x: &ArrayD<F>, grad: &ArrayD<F>) -> ArrayD<F> {
    let xv = x.view().into_dimensionality::<Ix3>().unwrap();
    let g = grad.view().into_dimensionality::<Ix3>().unwrap();
    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let mut dx = Array3::<F>::zeros((c, h, w));
    for ((ci, y, xi), &gv) in g.indexed_iter() {
        let mut cells = Vec::with_capacity(4);
        for dy in 0..2 {
            for dx_ in 0..2 {
                let (sy, sx) = (2 * y + dy, 2 * xi + dx_);
                if sy < h && sx < w {
                    cells.push((sy, sx));
                }
            }
        }
        let share = gv / F::from_usize(cells.len()).unwrap();
        for (sy, sx) in cells {
            dx[(ci, sy, sx)] += share;
        }
    }
    dx.into_dyn()
}

/// Per-axis source indices and weights for center-aligned 2x bilinear
/// upsampling.
fn upsample_axis_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|i| {
            let p = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            let w1 = p - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

pub(crate) fn upsample2_forward<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ytaps = upsample_axis_taps(h);
    let xtaps = upsample_axis_taps(w);
    let mut out = Array3::<F>::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for (oy, &(y0, y1, wy0, wy1)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in xtaps.iter().enumerate() {
                let v = x[(ci, y0, x0)] * F::of(wy0 * wx0)
                    + x[(ci, y0, x1)] * F::of(wy0 * wx1)
                    + x[(ci, y1, x0)] * F::of(wy1 * wx0)
                    + x[(ci, y1, x1)] * F::of(wy1 * wx1);
                out[(ci, oy, ox)] = v;
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<F: Scalar>(x: &ArrayD<F>, grad: &ArrayD<F>) -> ArrayD<F> {
    let xv = x.view().into_dimensionality::<Ix3>().unwrap();
    let g = grad.view().into_dimensionality::<Ix3>().unwrap();
    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let ytaps = upsample_axis_taps(h);
    let xtaps = upsample_axis_taps(w);
    let mut dx = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for (oy, &(y0, y1, wy0, wy1)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in xtaps.iter().enumerate() {
                let gv = g[(ci, oy, ox)];
                dx[(ci, y0, x0)] += gv * F::of(wy0 * wx0);
                dx[(ci, y0, x1)] += gv * F::of(wy0 * wx1);
                dx[(ci, y1, x0)] += gv * F::of(wy1 * wx0);
                dx[(ci, y1, x1)] += gv * F::of(wy1 * wx1);
            }
        }
    }
    dx.into_dyn()
}

/// Standalone (non-graph) convolution used by fixed-kernel filters.
pub fn conv2d_fixed<F: Scalar>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    stride: usize,
    pad: usize,
    pad_mode: PadMode,
) -> ArrayD<F> {
    let xv = x.view().into_dimensionality::<Ix3>().unwrap().to_owned();
    let cout = w.shape()[0];
    let bias = Array1::<F>::zeros(cout);
    let (y, _) = conv2d_forward(&xv, w, &bias, stride, pad, pad_mode);
    y.into_dyn()
}

#[allow(dead_code)]
pub(crate) fn as1<F: Scalar>(x: &ArrayD<F>) -> ndarray::ArrayView1<'_, F> {
    x.view().into_dimensionality::<Ix1>().unwrap()
}

#[allow(dead_code)]
pub(crate) fn as2<F: Scalar>(x: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    x.view().into_dimensionality::<Ix2>().unwrap()
}

#[allow(dead_code)]
pub(crate) fn zeros_like<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}
