//! Fused ConvSwiGLU feed-forward unit: Deconv(Swish(Conv_a(Norm(x))) * Conv_b(Norm(x))).
//!
//! Recorded as a single tape node; the backward pass recomputes the hidden
//! activations instead of keeping the (expansion x D)-sized intermediates
//! alive for the whole forward pass.

use ndarray::{Array3, ArrayView1, ArrayView3};

use super::conv::{conv1d_backward, conv1d_forward};
use super::norm::{rms_group_norm_backward, rms_group_norm_forward};
use super::{Graph, Var};

/// Static configuration of one ConvSwiGLU unit.
#[derive(Clone, Copy, Debug)]
pub struct SwigluSpec {
    pub kernel: usize,
    pub groups: usize,
    pub eps: f64,
}

impl SwigluSpec {
    fn pad_in(&self) -> usize {
        (self.kernel - 1) / 2
    }
    fn pad_out(&self) -> usize {
        self.kernel / 2
    }
}

struct Pieces {
    n: Array3<f64>,
    a: Array3<f64>,
    b: Array3<f64>,
    gate: Array3<f64>,
}

#[allow(clippy::too_many_arguments)]
fn recompute(
    x: &ArrayView3<f64>,
    ns: &ArrayView1<f64>,
    nb: &ArrayView1<f64>,
    wa: &ArrayView3<f64>,
    ba: &[f64],
    wb: &ArrayView3<f64>,
    bb: &[f64],
    spec: SwigluSpec,
) -> Pieces {
    let n = rms_group_norm_forward(x, ns, nb, spec.groups, spec.eps);
    let a = conv1d_forward(&n.view(), wa, ba, spec.pad_in());
    let b = conv1d_forward(&n.view(), wb, bb, spec.pad_in());
    let mut gate = a.clone();
    gate.zip_mut_with(&b, |g, &bv| {
        let s = 1.0 / (1.0 + (-*g).exp());
        *g = *g * s * bv;
    });
    Pieces { n, a, b, gate }
}

impl Graph {
    /// x: [B, D, L]; params: norm scale/bias [D], gate convs [Dh, D, K] (+bias),
    /// output conv [D, Dh, K] (+bias). Output shape equals input shape.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_swiglu(
        &mut self,
        x: Var,
        norm_scale: Var,
        norm_bias: Var,
        w_a: Var,
        b_a: Var,
        w_b: Var,
        b_b: Var,
        w_out: Var,
        b_out: Var,
        spec: SwigluSpec,
    ) -> Var {
        let grab1 = |g: &Graph, v: Var| -> Vec<f64> { g.value(v).iter().copied().collect() };
        let xv = self.value(x).view().into_dimensionality().unwrap();
        let nsv = self.value(norm_scale).view().into_dimensionality().unwrap();
        let nbv = self.value(norm_bias).view().into_dimensionality().unwrap();
        let wav = self.value(w_a).view().into_dimensionality().unwrap();
        let wbv = self.value(w_b).view().into_dimensionality().unwrap();
        let wov = self.value(w_out).view().into_dimensionality().unwrap();
        let bav = grab1(self, b_a);
        let bbv = grab1(self, b_b);
        let bov = grab1(self, b_out);
        let pieces = recompute(&xv, &nsv, &nbv, &wav, &bav, &wbv, &bbv, spec);
        let y = conv1d_forward(&pieces.gate.view(), &wov, &bov, spec.pad_out()).into_dyn();
        self.op(
            y,
            vec![x, norm_scale, norm_bias, w_a, b_a, w_b, b_b, w_out, b_out],
            Box::new(move |g_, g, id| {
                let p = |i: usize| g_.parent(id, i);
                let xv = g_.value(p(0)).view().into_dimensionality().unwrap();
                let nsv = g_.value(p(1)).view().into_dimensionality().unwrap();
                let nbv = g_.value(p(2)).view().into_dimensionality().unwrap();
                let wav = g_.value(p(3)).view().into_dimensionality().unwrap();
                let bav: Vec<f64> = g_.value(p(4)).iter().copied().collect();
                let wbv = g_.value(p(5)).view().into_dimensionality().unwrap();
                let bbv: Vec<f64> = g_.value(p(6)).iter().copied().collect();
                let wov = g_.value(p(7)).view().into_dimensionality().unwrap();
                let pieces = recompute(&xv, &nsv, &nbv, &wav, &bav, &wbv, &bbv, spec);
                let dyv = g.view().into_dimensionality().unwrap();

                let (dgate, dwo, dbo) =
                    conv1d_backward(&pieces.gate.view(), &wov, &dyv, spec.pad_out());

                // gate = swish(a) * b
                let mut da = dgate.clone();
                da.zip_mut_with(&pieces.a, |d, &av| {
                    let s = 1.0 / (1.0 + (-av).exp());
                    *d *= s + av * s * (1.0 - s);
                });
                da.zip_mut_with(&pieces.b, |d, &bv| *d *= bv);
                let mut db = dgate;
                db.zip_mut_with(&pieces.a, |d, &av| {
                    let s = 1.0 / (1.0 + (-av).exp());
                    *d *= av * s;
                });

                let (dn_a, dwa, dba) = conv1d_backward(&pieces.n.view(), &wav, &da.view(), spec.pad_in());
                let (dn_b, dwb, dbb) = conv1d_backward(&pieces.n.view(), &wbv, &db.view(), spec.pad_in());
                let dn = dn_a + dn_b;
                let (dx, dns, dnb) =
                    rms_group_norm_backward(&xv, &nsv, &dn.view(), spec.groups, spec.eps);

                vec![
                    dx.into_dyn(),
                    dns.into_dyn(),
                    dnb.into_dyn(),
                    dwa.into_dyn(),
                    ndarray::Array1::from_vec(dba).into_dyn(),
                    dwb.into_dyn(),
                    ndarray::Array1::from_vec(dbb).into_dyn(),
                    dwo.into_dyn(),
                    ndarray::Array1::from_vec(dbo).into_dyn(),
                ]
            }),
        )
    }
}
