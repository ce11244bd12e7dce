//! Root-mean-square group normalization over the channel axis.

use ndarray::{Array1, Array3, ArrayView1, ArrayView3};

use super::{Graph, Var};

/// x: [B, D, L]; channels are split into `groups` contiguous groups and each
/// group is divided by its RMS (over channels, per position), then scaled
/// and shifted per channel.
pub fn rms_group_norm_forward(
    x: &ArrayView3<f64>,
    scale: &ArrayView1<f64>,
    bias: &ArrayView1<f64>,
    groups: usize,
    eps: f64,
) -> Array3<f64> {
    let (b, d, l) = x.dim();
    assert!(d % groups == 0, "rms_group_norm: D must be divisible by groups");
    let gs = d / groups;
    let mut y = Array3::<f64>::zeros((b, d, l));
    let mut inv_r = vec![0.0; l];
    for bi in 0..b {
        let xb = x.index_axis(ndarray::Axis(0), bi);
        let mut yb = y.index_axis_mut(ndarray::Axis(0), bi);
        for g in 0..groups {
            let base = g * gs;
            inv_r.fill(0.0);
            for c in 0..gs {
                let xr = xb.row(base + c);
                let xr = xr.to_slice().unwrap();
                for (acc, &v) in inv_r.iter_mut().zip(xr) {
                    *acc += v * v;
                }
            }
            for r in inv_r.iter_mut() {
                *r = 1.0 / (*r / gs as f64 + eps).sqrt();
            }
            for c in 0..gs {
                let (sc, bv) = (scale[base + c], bias[base + c]);
                let xr = xb.row(base + c);
                let xr = xr.to_slice().unwrap();
                let mut yr = yb.row_mut(base + c);
                let yr = yr.as_slice_mut().unwrap();
                for t in 0..l {
                    yr[t] = xr[t] * inv_r[t] * sc + bv;
                }
            }
        }
    }
    y
}

/// Returns (dx, dscale, dbias).
pub fn rms_group_norm_backward(
    x: &ArrayView3<f64>,
    scale: &ArrayView1<f64>,
    dy: &ArrayView3<f64>,
    groups: usize,
    eps: f64,
) -> (Array3<f64>, Array1<f64>, Array1<f64>) {
    let (b, d, l) = x.dim();
    let gs = d / groups;
    let mut dx = Array3::<f64>::zeros((b, d, l));
    let mut dscale = Array1::<f64>::zeros(d);
    let mut dbias = Array1::<f64>::zeros(d);
    let mut inv_r = vec![0.0; l];
    let mut dot = vec![0.0; l];
    for bi in 0..b {
        let xb = x.index_axis(ndarray::Axis(0), bi);
        let dyb = dy.index_axis(ndarray::Axis(0), bi);
        let mut dxb = dx.index_axis_mut(ndarray::Axis(0), bi);
        for g in 0..groups {
            let base = g * gs;
            inv_r.fill(0.0);
            for c in 0..gs {
                let xr = xb.row(base + c);
                let xr = xr.to_slice().unwrap();
                for (acc, &v) in inv_r.iter_mut().zip(xr) {
                    *acc += v * v;
                }
            }
            for r in inv_r.iter_mut() {
                *r = 1.0 / (*r / gs as f64 + eps).sqrt();
            }
            dot.fill(0.0);
            for c in 0..gs {
                let sc = scale[base + c];
                let xr = xb.row(base + c);
                let xr = xr.to_slice().unwrap();
                let gyr = dyb.row(base + c);
                let gyr = gyr.to_slice().unwrap();
                let (mut dsc, mut dbc) = (0.0, 0.0);
                for t in 0..l {
                    let u = xr[t] * inv_r[t];
                    dsc += gyr[t] * u;
                    dbc += gyr[t];
                    dot[t] += gyr[t] * sc * u;
                }
                dscale[base + c] += dsc;
                dbias[base + c] += dbc;
            }
            for c in 0..gs {
                let sc = scale[base + c];
                let xr = xb.row(base + c);
                let xr = xr.to_slice().unwrap();
                let gyr = dyb.row(base + c);
                let gyr = gyr.to_slice().unwrap();
                let mut dxr = dxb.row_mut(base + c);
                let dxr = dxr.as_slice_mut().unwrap();
                for t in 0..l {
                    let u = xr[t] * inv_r[t];
                    dxr[t] = (gyr[t] * sc - u * dot[t] / gs as f64) * inv_r[t];
                }
            }
        }
    }
    (dx, dscale, dbias)
}

impl Graph {
    /// RMS group norm over axis 1 of a [B, D, L] tensor.
    pub fn rms_group_norm(&mut self, x: Var, scale: Var, bias: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x).view().into_dimensionality().unwrap();
        let sv = self.value(scale).view().into_dimensionality().unwrap();
        let bv = self.value(bias).view().into_dimensionality().unwrap();
        let y = rms_group_norm_forward(&xv, &sv, &bv, groups, eps).into_dyn();
        self.op(
            y,
            vec![x, scale, bias],
            Box::new(move |g_, g, id| {
                let (x, s) = (g_.parent(id, 0), g_.parent(id, 1));
                let xv = g_.value(x).view().into_dimensionality().unwrap();
                let sv = g_.value(s).view().into_dimensionality().unwrap();
                let dyv = g.view().into_dimensionality().unwrap();
                let (dx, ds, db) = rms_group_norm_backward(&xv, &sv, &dyv, groups, eps);
                vec![dx.into_dyn(), ds.into_dyn(), db.into_dyn()]
            }),
        )
    }
}
