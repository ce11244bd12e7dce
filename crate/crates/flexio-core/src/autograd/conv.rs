//! 1-D and 2-D convolution (stride 1) with explicit padding.
//!
//! Forward/backward pairs are exposed as free functions so that fused ops
//! (ConvSwiGLU) can reuse them during their recompute-based backward pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};

use super::{Graph, Var};

/// Fill `cols` ([C*K, L]) with the patch matrix of batch element `bi`,
/// copying each (channel, tap) diagonal as one contiguous slice.
fn im2col_1d_into(x: &ArrayView3<f64>, bi: usize, k: usize, pl: usize, cols: &mut Array2<f64>) {
    let (_, c, l) = x.dim();
    for ci in 0..c {
        let src_lane = x.index_axis(Axis(0), bi);
        let src_lane = src_lane.index_axis(Axis(0), ci);
        let src = src_lane.to_slice().expect("conv input lane not contiguous");
        for ki in 0..k {
            let mut row_lane = cols.row_mut(ci * k + ki);
            let row = row_lane.as_slice_mut().unwrap();
            // Output positions t map to input positions t + ki - pl.
            let t0 = pl.saturating_sub(ki);
            let t1 = (l + pl).saturating_sub(ki).min(l);
            row[..t0].fill(0.0);
            row[t0..t1].copy_from_slice(&src[t0 + ki - pl..t1 + ki - pl]);
            row[t1..].fill(0.0);
        }
    }
}

/// Scatter-add the patch-matrix gradient back onto one input batch element.
fn col2im_1d_add(cols: &Array2<f64>, k: usize, pl: usize, dx: &mut ndarray::ArrayViewMut2<f64>) {
    let (c, l) = dx.dim();
    for ci in 0..c {
        let mut dst_lane = dx.row_mut(ci);
        let dst = dst_lane.as_slice_mut().unwrap();
        for ki in 0..k {
            let row_lane = cols.row(ci * k + ki);
            let row = row_lane.to_slice().unwrap();
            let t0 = pl.saturating_sub(ki);
            let t1 = (l + pl).saturating_sub(ki).min(l);
            for t in t0..t1 {
                dst[t + ki - pl] += row[t];
            }
        }
    }
}

/// x: [B, C, L], w: [O, C, K], bias: [O]; same-length output, stride 1.
/// `pl` is the left padding; right padding is `K - 1 - pl`.
pub fn conv1d_forward(x: &ArrayView3<f64>, w: &ArrayView3<f64>, bias: &[f64], pl: usize) -> Array3<f64> {
    let (b, c, l) = x.dim();
    let (o, cw, k) = w.dim();
    assert_eq!(c, cw, "conv1d: channel mismatch");
    let w2 = w.to_shape((o, c * k)).unwrap().to_owned();
    let mut y = Array3::<f64>::zeros((b, o, l));
    let mut cols = Array2::<f64>::zeros((c * k, l));
    for bi in 0..b {
        im2col_1d_into(x, bi, k, pl, &mut cols);
        let mut yb = y.index_axis_mut(Axis(0), bi);
        general_mat_mul(1.0, &w2, &cols, 0.0, &mut yb);
        for (oi, &bv) in bias.iter().enumerate() {
            yb.row_mut(oi).mapv_inplace(|v| v + bv);
        }
    }
    y
}

/// Returns (dx, dw, dbias).
pub fn conv1d_backward(
    x: &ArrayView3<f64>,
    w: &ArrayView3<f64>,
    dy: &ArrayView3<f64>,
    pl: usize,
) -> (Array3<f64>, Array3<f64>, Vec<f64>) {
    let (b, c, l) = x.dim();
    let (o, _, k) = w.dim();
    let w2 = w.to_shape((o, c * k)).unwrap().to_owned();
    let mut dx = Array3::<f64>::zeros((b, c, l));
    let mut dw2 = Array2::<f64>::zeros((o, c * k));
    let mut dbias = vec![0.0; o];
    let mut cols = Array2::<f64>::zeros((c * k, l));
    let mut dcols = Array2::<f64>::zeros((c * k, l));
    for bi in 0..b {
        im2col_1d_into(x, bi, k, pl, &mut cols);
        let dyb = dy.index_axis(Axis(0), bi);
        general_mat_mul(1.0, &dyb, &cols.t(), 1.0, &mut dw2);
        general_mat_mul(1.0, &w2.t(), &dyb, 0.0, &mut dcols);
        col2im_1d_add(&dcols, k, pl, &mut dx.index_axis_mut(Axis(0), bi));
        for oi in 0..o {
            dbias[oi] += dyb.row(oi).sum();
        }
    }
    let dw = dw2.into_shape_with_order((o, c, k)).unwrap();
    (dx, dw, dbias)
}

/// Fill `cols` ([C*KH*KW, H*W]) with the patch matrix of batch element `bi`;
/// for each (channel, tap) the valid span of every image row is one
/// contiguous slice copy.
fn im2col_2d_into(
    x: &ArrayView4<f64>,
    bi: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    cols: &mut Array2<f64>,
) {
    let (_, c, h, wd) = x.dim();
    cols.fill(0.0);
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), bi);
        let plane = plane.index_axis(Axis(0), ci);
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut lane = cols.row_mut(row);
                let lane = lane.as_slice_mut().unwrap();
                // Output columns j map to input columns j + kj - pw.
                let j0 = pw.saturating_sub(kj);
                let j1 = (wd + pw).saturating_sub(kj).min(wd);
                for i in 0..h {
                    let si = i as isize + ki as isize - ph as isize;
                    if si < 0 || si as usize >= h {
                        continue;
                    }
                    let src = plane.index_axis(Axis(0), si as usize);
                    let src = src.to_slice().unwrap();
                    lane[i * wd + j0..i * wd + j1]
                        .copy_from_slice(&src[j0 + kj - pw..j1 + kj - pw]);
                }
            }
        }
    }
}

/// x: [B, C, H, W], w: [O, C, KH, KW]; same-size output, stride 1,
/// symmetric padding (KH/2 rounding down on the leading side).
pub fn conv2d_forward(x: &ArrayView4<f64>, w: &ArrayView4<f64>, bias: &[f64]) -> Array4<f64> {
    let (b, c, h, wd) = x.dim();
    let (o, cw, kh, kw) = w.dim();
    assert_eq!(c, cw, "conv2d: channel mismatch");
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let w2 = w.to_shape((o, c * kh * kw)).unwrap().to_owned();
    let mut y = Array4::<f64>::zeros((b, o, h, wd));
    let mut cols = Array2::<f64>::zeros((c * kh * kw, h * wd));
    for bi in 0..b {
        im2col_2d_into(x, bi, kh, kw, ph, pw, &mut cols);
        let yb = y.index_axis_mut(Axis(0), bi);
        let mut yb = yb.into_shape_with_order((o, h * wd)).unwrap();
        general_mat_mul(1.0, &w2, &cols, 0.0, &mut yb);
        for (oi, &bv) in bias.iter().enumerate() {
            yb.row_mut(oi).mapv_inplace(|v| v + bv);
        }
    }
    y
}

/// Returns (dx, dw, dbias) for [`conv2d_forward`].
pub fn conv2d_backward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    dy: &ArrayView4<f64>,
) -> (Array4<f64>, Array4<f64>, Vec<f64>) {
    let (b, c, h, wd) = x.dim();
    let (o, _, kh, kw) = w.dim();
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let w2 = w.to_shape((o, c * kh * kw)).unwrap().to_owned();
    let mut dx = Array4::<f64>::zeros((b, c, h, wd));
    let mut dw2 = Array2::<f64>::zeros((o, c * kh * kw));
    let mut dbias = vec![0.0; o];
    let mut cols = Array2::<f64>::zeros((c * kh * kw, h * wd));
    let mut dcols = Array2::<f64>::zeros((c * kh * kw, h * wd));
    for bi in 0..b {
        im2col_2d_into(x, bi, kh, kw, ph, pw, &mut cols);
        let dyb = dy.index_axis(Axis(0), bi);
        let dyb = dyb.to_shape((o, h * wd)).unwrap();
        general_mat_mul(1.0, &dyb.view(), &cols.t(), 1.0, &mut dw2);
        for oi in 0..o {
            dbias[oi] += dyb.row(oi).sum();
        }
        general_mat_mul(1.0, &w2.t(), &dyb.view(), 0.0, &mut dcols);
        let mut dxb = dx.index_axis_mut(Axis(0), bi);
        for ci in 0..c {
            let mut plane = dxb.index_axis_mut(Axis(0), ci);
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let lane = dcols.row(row);
                    let lane = lane.to_slice().unwrap();
                    let j0 = pw.saturating_sub(kj);
                    let j1 = (wd + pw).saturating_sub(kj).min(wd);
                    for i in 0..h {
                        let si = i as isize + ki as isize - ph as isize;
                        if si < 0 || si as usize >= h {
                            continue;
                        }
                        let mut dst = plane.index_axis_mut(Axis(0), si as usize);
                        let dst = dst.as_slice_mut().unwrap();
                        for j in j0..j1 {
                            dst[j + kj - pw] += lane[i * wd + j];
                        }
                    }
                }
            }
        }
    }
    let dw = dw2.into_shape_with_order((o, c, kh, kw)).unwrap();
    (dx, dw, dbias)
}

impl Graph {
    /// Same-length 1-D convolution along the last axis of a [B, C, L] tensor.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, pad_left: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality().unwrap();
        let wv = self.value(w).view().into_dimensionality().unwrap();
        let bv: Vec<f64> = self.value(bias).iter().copied().collect();
        let y = conv1d_forward(&xv, &wv, &bv, pad_left).into_dyn();
        self.op(
            y,
            vec![x, w, bias],
            Box::new(move |g_, g, id| {
                let (x, w) = (g_.parent(id, 0), g_.parent(id, 1));
                let xv = g_.value(x).view().into_dimensionality().unwrap();
                let wv = g_.value(w).view().into_dimensionality().unwrap();
                let dyv = g.view().into_dimensionality().unwrap();
                let (dx, dw, db) = conv1d_backward(&xv, &wv, &dyv, pad_left);
                vec![
                    dx.into_dyn(),
                    dw.into_dyn(),
                    ndarray::Array1::from_vec(db).into_dyn(),
                ]
            }),
        )
    }

    /// Same-size 2-D convolution over a [B, C, H, W] tensor.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality().unwrap();
        let wv = self.value(w).view().into_dimensionality().unwrap();
        let bv: Vec<f64> = self.value(bias).iter().copied().collect();
        let y = conv2d_forward(&xv, &wv, &bv).into_dyn();
        self.op(
            y,
            vec![x, w, bias],
            Box::new(move |g_, g, id| {
                let (x, w) = (g_.parent(id, 0), g_.parent(id, 1));
                let xv = g_.value(x).view().into_dimensionality().unwrap();
                let wv = g_.value(w).view().into_dimensionality().unwrap();
                let dyv = g.view().into_dimensionality().unwrap();
                let (dx, dw, db) = conv2d_backward(&xv, &wv, &dyv);
                vec![
                    dx.into_dyn(),
                    dw.into_dyn(),
                    ndarray::Array1::from_vec(db).into_dyn(),
                ]
            }),
        )
    }
}
