//! Array-agnostic channel communication: transform-average-concatenate (TAC),
//! cross-channel attention, and co-attention weight computation. Parameter
//! shapes are independent of the channel count M, so one trained model serves
//! any array geometry.

use ndarray::{Array2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionSpec, Graph, Var};
use crate::error::{FlexioError, Result};
use crate::layers::{init_linear, init_prelu, init_rms_norm, linear, prelu};
use crate::params::{Bind, ParamInit};

/// Which mechanism the cross-prompt module uses to exchange information
/// across microphone channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommMechanism {
    Tac,
    CrossChannelAttention,
    CoAttention,
    None,
}

/// Shape configuration for the communication layers.
#[derive(Clone, Copy, Debug)]
pub struct CommSpec {
    pub dim: usize,
    pub tac_hidden: usize,
    pub att_heads: usize,
    pub att_head_dim: usize,
    pub norm_groups: usize,
    pub eps: f64,
}

fn map_to_rows(g: &mut Graph, x: Var) -> (Var, [usize; 3]) {
    let shape = g.value(x).shape().to_vec();
    let (d, l, f) = (shape[0], shape[1], shape[2]);
    let seq = g.permute(x, &[1, 2, 0]); // [L, F, D]
    (g.reshape(seq, &[l * f, d]), [d, l, f])
}

fn rows_to_map(g: &mut Graph, rows: Var, dims: [usize; 3]) -> Var {
    let [d, l, f] = dims;
    let seq = g.reshape(rows, &[l, f, d]);
    g.permute(seq, &[2, 0, 1])
}

/// Transform-average-concatenate over per-channel [D, L, F] maps.
/// Falls back to plain per-channel fully-connected layers at M = 1.
pub fn tac(g: &mut Graph, bind: &Bind, prefix: &str, xs: &[Var], spec: &CommSpec) -> Vec<Var> {
    assert!(!xs.is_empty(), "tac: at least one channel required");
    let m = xs.len();
    let mut rows = Vec::with_capacity(m);
    let mut dims = [0usize; 3];
    for &x in xs {
        let (r, dm) = map_to_rows(g, x);
        dims = dm;
        let w = linear(g, bind, &format!("{prefix}.fc_in"), r);
        rows.push(prelu(g, bind, &format!("{prefix}.fc_in"), w));
    }
    let mut mean = rows[0];
    for &r in &rows[1..] {
        mean = g.add(mean, r);
    }
    mean = g.scale(mean, 1.0 / m as f64);
    let avg = linear(g, bind, &format!("{prefix}.fc_avg"), mean);
    let avg = prelu(g, bind, &format!("{prefix}.fc_avg"), avg);

    xs.iter()
        .zip(rows)
        .map(|(&x, w_m)| {
            // FC_cat projects straight back to D (no activation) before Norm.
            let cat = g.concat(&[w_m, avg], 1);
            let y = linear(g, bind, &format!("{prefix}.fc_cat"), cat);
            // Norm over D at each TF position.
            let yt = g.permute(y, &[1, 0]);
            let y3 = g.reshape(yt, &[1, dims[0], dims[1] * dims[2]]);
            let scale = bind.var(&format!("{prefix}.norm.scale"));
            let bias = bind.var(&format!("{prefix}.norm.bias"));
            let n = g.rms_group_norm(y3, scale, bias, spec.norm_groups, spec.eps);
            let n2 = g.reshape(n, &[dims[0], dims[1] * dims[2]]);
            let nt = g.permute(n2, &[1, 0]);
            let back = rows_to_map(g, nt, dims);
            g.add(x, back)
        })
        .collect()
}

pub fn init_tac<R: Rng>(init: &mut ParamInit<R>, prefix: &str, spec: &CommSpec) {
    let (d, e) = (spec.dim, spec.tac_hidden);
    init_linear(init, &format!("{prefix}.fc_in"), d, e);
    init_prelu(init, &format!("{prefix}.fc_in"), e);
    init_linear(init, &format!("{prefix}.fc_avg"), e, e);
    init_prelu(init, &format!("{prefix}.fc_avg"), e);
    init_linear(init, &format!("{prefix}.fc_cat"), 2 * e, d);
    init_rms_norm(init, &format!("{prefix}.norm"), d);
}

/// Pre-norm residual MHSA over the channel axis at each TF position,
/// without positional encoding.
pub fn cross_channel_attention(
    g: &mut Graph,
    bind: &Bind,
    prefix: &str,
    xs: &[Var],
    spec: &CommSpec,
) -> Vec<Var> {
    assert!(!xs.is_empty(), "cross_channel_attention: at least one channel required");
    let m = xs.len();
    let (heads, hd) = (spec.att_heads, spec.att_head_dim);
    let mut dims = [0usize; 3];
    let mut qs = Vec::new();
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    for &x in xs {
        let n = crate::layers::rms_norm_map(
            g,
            bind,
            &format!("{prefix}.norm"),
            x,
            spec.norm_groups,
            spec.eps,
        );
        let (rows, dm) = map_to_rows(g, n);
        dims = dm;
        let positions = dims[1] * dims[2];
        for (proj, acc) in [("q", &mut qs), ("k", &mut ks), ("v", &mut vs)] {
            let y = linear(g, bind, &format!("{prefix}.{proj}"), rows);
            acc.push(g.reshape(y, &[1, positions * heads, 1, hd]));
        }
    }
    let q = g.concat(&qs, 2);
    let k = g.concat(&ks, 2);
    let v = g.concat(&vs, 2);
    let att = g.attention(
        q,
        k,
        v,
        AttentionSpec { co: false, rope: false, scale: 1.0 / (hd as f64).sqrt() },
    );
    let positions = dims[1] * dims[2];
    (0..m)
        .map(|mi| {
            let y = g.slice(att, 2, mi, mi + 1);
            let y = g.reshape(y, &[positions, heads * hd]);
            let y = linear(g, bind, &format!("{prefix}.out"), y);
            let back = rows_to_map(g, y, dims);
            g.add(xs[mi], back)
        })
        .collect()
}

pub fn init_cross_channel_attention<R: Rng>(init: &mut ParamInit<R>, prefix: &str, spec: &CommSpec) {
    let (d, a) = (spec.dim, spec.att_heads * spec.att_head_dim);
    init_rms_norm(init, &format!("{prefix}.norm"), d);
    for proj in ["q", "k", "v"] {
        init_linear(init, &format!("{prefix}.{proj}"), d, a);
    }
    init_linear(init, &format!("{prefix}.out"), a, d);
}

/// Channel-shared co-attention weights for one head:
/// softmax((sum_m Q_m K_m^T) / sqrt(D_att * M)). Qs/Ks: [M, L, D_att].
pub fn co_attention_weights(qs: &ArrayView3<f64>, ks: &ArrayView3<f64>) -> Result<Array2<f64>> {
    let (m, l, d_att) = qs.dim();
    if m == 0 {
        return Err(FlexioError::InvalidInput("co-attention requires at least one channel".into()));
    }
    if ks.dim() != (m, l, d_att) {
        return Err(FlexioError::InvalidInput("query/key shape mismatch".into()));
    }
    let mut logits = Array2::<f64>::zeros((l, l));
    for mi in 0..m {
        let q = qs.index_axis(ndarray::Axis(0), mi);
        let k = ks.index_axis(ndarray::Axis(0), mi);
        logits = logits + q.dot(&k.t());
    }
    let scale = 1.0 / ((d_att * m) as f64).sqrt();
    logits.mapv_inplace(|v| v * scale);
    for mut row in logits.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok(logits)
}
