//! TF-locoformer building blocks: ConvSwiGLU feed-forward units, RoPE
//! multi-head self-attention, RMS group norm, and the dual-path block that
//! applies them along the time axis and then the frequency axis.
//!
//! Feature maps are [D, L, F] tensors per microphone channel. All functions
//! take a list of per-channel maps so that the co-attention variant can share
//! attention weights across channels; single-channel processing passes a
//! one-element slice.

use rand::Rng;

use crate::autograd::{AttentionSpec, Graph, SwigluSpec, Var};
use crate::params::{Bind, ParamInit};

/// Which axis a dual-path stage attends over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqAxis {
    Time,
    Freq,
}

/// Static shape configuration of one TF-locoformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub conv_kernel: usize,
    pub ffn_expansion: usize,
    pub norm_groups: usize,
    pub eps: f64,
    /// Skip the ConvSwiGLU before MHSA (medium-size cross-prompt blocks).
    pub omit_pre_mhsa_ffn: bool,
    /// Replace per-channel attention weights with channel-shared co-attention.
    pub co_attention: bool,
}

impl BlockSpec {
    pub fn hidden(&self) -> usize {
        self.ffn_expansion * self.dim
    }
    fn swiglu(&self) -> SwigluSpec {
        SwigluSpec { kernel: self.conv_kernel, groups: self.norm_groups, eps: self.eps }
    }
}

// ----- primitives on [D, L, F] maps -----

/// Fully-connected layer over the last axis of a rank-2 [N, Din] tensor.
pub fn linear(g: &mut Graph, bind: &Bind, prefix: &str, x: Var) -> Var {
    let w = bind.var(&format!("{prefix}.w"));
    let b = bind.var(&format!("{prefix}.b"));
    g.matmul_bias(x, w, b)
}

pub fn init_linear<R: Rng>(init: &mut ParamInit<R>, prefix: &str, d_in: usize, d_out: usize) {
    init.fan_in(&format!("{prefix}.w"), &[d_in, d_out], d_in);
    init.fan_in(&format!("{prefix}.b"), &[d_out], d_in);
}

/// PReLU over a [N, C] tensor with one learned slope per channel.
pub fn prelu(g: &mut Graph, bind: &Bind, prefix: &str, x: Var) -> Var {
    let alpha = bind.var(&format!("{prefix}.alpha"));
    g.prelu(x, alpha)
}

pub fn init_prelu<R: Rng>(init: &mut ParamInit<R>, prefix: &str, channels: usize) {
    init.constant(&format!("{prefix}.alpha"), &[channels], 0.25);
}

/// RMS group norm over the feature axis of a [D, L, F] map.
pub fn rms_norm_map(
    g: &mut Graph,
    bind: &Bind,
    prefix: &str,
    x: Var,
    groups: usize,
    eps: f64,
) -> Var {
    let shape = g.value(x).shape().to_vec();
    let (d, l, f) = (shape[0], shape[1], shape[2]);
    let x3 = g.reshape(x, &[1, d, l * f]);
    let scale = bind.var(&format!("{prefix}.scale"));
    let bias = bind.var(&format!("{prefix}.bias"));
    let y = g.rms_group_norm(x3, scale, bias, groups, eps);
    g.reshape(y, &[d, l, f])
}

pub fn init_rms_norm<R: Rng>(init: &mut ParamInit<R>, prefix: &str, dim: usize) {
    init.constant(&format!("{prefix}.scale"), &[dim], 1.0);
    init.constant(&format!("{prefix}.bias"), &[dim], 0.0);
}

/// ConvSwiGLU along the chosen axis of a [D, L, F] map (residual not included).
pub fn conv_swiglu_map(
    g: &mut Graph,
    bind: &Bind,
    prefix: &str,
    x: Var,
    axis: SeqAxis,
    spec: &BlockSpec,
) -> Var {
    let p = |n: &str| bind.var(&format!("{prefix}.{n}"));
    let to_seq: &[usize] = match axis {
        SeqAxis::Time => &[2, 0, 1], // [D, L, F] -> [F, D, L]
        SeqAxis::Freq => &[1, 0, 2], // [D, L, F] -> [L, D, F]
    };
    let back: &[usize] = match axis {
        SeqAxis::Time => &[1, 2, 0],
        SeqAxis::Freq => &[1, 0, 2],
    };
    let xs = g.permute(x, to_seq);
    let y = g.conv_swiglu(
        xs,
        p("norm.scale"),
        p("norm.bias"),
        p("a.w"),
        p("a.b"),
        p("b.w"),
        p("b.b"),
        p("out.w"),
        p("out.b"),
        spec.swiglu(),
    );
    g.permute(y, back)
}

pub fn init_conv_swiglu<R: Rng>(init: &mut ParamInit<R>, prefix: &str, spec: &BlockSpec) {
    let (d, h, k) = (spec.dim, spec.hidden(), spec.conv_kernel);
    init_rms_norm(init, &format!("{prefix}.norm"), d);
    init.fan_in(&format!("{prefix}.a.w"), &[h, d, k], d * k);
    init.fan_in(&format!("{prefix}.a.b"), &[h], d * k);
    init.fan_in(&format!("{prefix}.b.w"), &[h, d, k], d * k);
    init.fan_in(&format!("{prefix}.b.b"), &[h], d * k);
    init.fan_in(&format!("{prefix}.out.w"), &[d, h, k], h * k);
    init.fan_in(&format!("{prefix}.out.b"), &[d], h * k);
}

/// Pre-norm RoPE multi-head self-attention along `axis`, jointly over all
/// channels when `spec.co_attention` is set (residual not included).
pub fn mhsa_map(
    g: &mut Graph,
    bind: &Bind,
    prefix: &str,
    xs: &[Var],
    axis: SeqAxis,
    spec: &BlockSpec,
) -> Vec<Var> {
    let channels = xs.len();
    let shape = g.value(xs[0]).shape().to_vec();
    let (d, t, f) = (shape[0], shape[1], shape[2]);
    let (heads, hd) = (spec.heads, spec.head_dim);
    // Sequence length and batch size for the chosen axis.
    let (len, batch) = match axis {
        SeqAxis::Time => (t, f),
        SeqAxis::Freq => (f, t),
    };
    let to_seq: &[usize] = match axis {
        SeqAxis::Time => &[2, 1, 0], // [D, T, F] -> [F, T, D]
        SeqAxis::Freq => &[1, 2, 0], // [D, T, F] -> [T, F, D]
    };
    let back: &[usize] = match axis {
        SeqAxis::Time => &[2, 1, 0],
        SeqAxis::Freq => &[2, 0, 1],
    };

    let mut qs = Vec::with_capacity(channels);
    let mut ks = Vec::with_capacity(channels);
    let mut vs = Vec::with_capacity(channels);
    for &x in xs {
        let n = rms_norm_map(g, bind, &format!("{prefix}.norm"), x, spec.norm_groups, spec.eps);
        let seq = g.permute(n, to_seq);
        let flat = g.reshape(seq, &[batch * len, d]);
        for (proj, acc) in [("q", &mut qs), ("k", &mut ks), ("v", &mut vs)] {
            let y = linear(g, bind, &format!("{prefix}.{proj}"), flat);
            let y = g.reshape(y, &[batch, len, heads, hd]);
            let y = g.permute(y, &[0, 2, 1, 3]);
            acc.push(g.reshape(y, &[1, batch * heads, len, hd]));
        }
    }
    let q = g.concat(&qs, 0);
    let k = g.concat(&ks, 0);
    let v = g.concat(&vs, 0);
    let denom = hd as f64 * if spec.co_attention { channels as f64 } else { 1.0 };
    let att = g.attention(
        q,
        k,
        v,
        AttentionSpec { co: spec.co_attention, rope: true, scale: 1.0 / denom.sqrt() },
    );

    (0..channels)
        .map(|m| {
            let y = g.slice(att, 0, m, m + 1);
            let y = g.reshape(y, &[batch, heads, len, hd]);
            let y = g.permute(y, &[0, 2, 1, 3]);
            let y = g.reshape(y, &[batch * len, heads * hd]);
            let y = linear(g, bind, &format!("{prefix}.out"), y);
            let y = g.reshape(y, &[batch, len, d]);
            g.permute(y, back)
        })
        .collect()
}

pub fn init_mhsa<R: Rng>(init: &mut ParamInit<R>, prefix: &str, spec: &BlockSpec) {
    let (d, a) = (spec.dim, spec.heads * spec.head_dim);
    init_rms_norm(init, &format!("{prefix}.norm"), d);
    for proj in ["q", "k", "v"] {
        init_linear(init, &format!("{prefix}.{proj}"), d, a);
    }
    init_linear(init, &format!("{prefix}.out"), a, d);
}

// ----- the dual-path block -----

fn stage(
    g: &mut Graph,
    bind: &Bind,
    prefix: &str,
    mut xs: Vec<Var>,
    axis: SeqAxis,
    spec: &BlockSpec,
) -> Vec<Var> {
    if !spec.omit_pre_mhsa_ffn {
        for x in xs.iter_mut() {
            let y = conv_swiglu_map(g, bind, &format!("{prefix}.ffn1"), *x, axis, spec);
            *x = g.add(*x, y);
        }
    }
    let att = mhsa_map(g, bind, &format!("{prefix}.att"), &xs, axis, spec);
    for (x, a) in xs.iter_mut().zip(att) {
        *x = g.add(*x, a);
    }
    for x in xs.iter_mut() {
        let y = conv_swiglu_map(g, bind, &format!("{prefix}.ffn2"), *x, axis, spec);
        *x = g.add(*x, y);
    }
    xs
}

/// One TF-locoformer block over per-channel [D, L, F] maps: temporal stage
/// followed by a frequency stage, each with residual connections. Weights
/// are shared across channels (and across speakers when used in the TSE head).
pub fn locoformer_block(
    g: &mut Graph,
    bind: &Bind,
    prefix: &str,
    xs: Vec<Var>,
    spec: &BlockSpec,
) -> Vec<Var> {
    let xs = stage(g, bind, &format!("{prefix}.time"), xs, SeqAxis::Time, spec);
    stage(g, bind, &format!("{prefix}.freq"), xs, SeqAxis::Freq, spec)
}

pub fn init_locoformer_block<R: Rng>(init: &mut ParamInit<R>, prefix: &str, spec: &BlockSpec) {
    for axis in ["time", "freq"] {
        if !spec.omit_pre_mhsa_ffn {
            init_conv_swiglu(init, &format!("{prefix}.{axis}.ffn1"), spec);
        }
        init_mhsa(init, &format!("{prefix}.{axis}.att"), spec);
        init_conv_swiglu(init, &format!("{prefix}.{axis}.ffn2"), spec);
    }
}

/// Global layer normalization over a whole [D, L, F] map with per-feature affine.
pub fn global_layer_norm(
    g: &mut Graph,
    bind: &Bind,
    prefix: &str,
    x: Var,
    eps: f64,
) -> Var {
    let shape = g.value(x).shape().to_vec();
    let n = shape.iter().product::<usize>() as f64;
    let d = shape[0];
    let sum = g.sum_all(x);
    let mean = g.scale(sum, 1.0 / n);
    let mean3 = g.reshape(mean, &[1, 1, 1]);
    let neg_mean = g.scale(mean3, -1.0);
    let centered = g.add_bc(x, neg_mean);
    let sq = g.mul(centered, centered);
    let var_sum = g.sum_all(sq);
    let var = g.scale(var_sum, 1.0 / n);
    let var_eps = g.add_scalar(var, eps);
    let r = g.rsqrt(var_eps);
    let r3 = g.reshape(r, &[1, 1, 1]);
    let normed = g.mul_bc(centered, r3);
    let gamma = bind.var(&format!("{prefix}.scale"));
    let beta = bind.var(&format!("{prefix}.bias"));
    let gamma3 = g.reshape(gamma, &[d, 1, 1]);
    let beta3 = g.reshape(beta, &[d, 1, 1]);
    let scaled = g.mul_bc(normed, gamma3);
    g.add_bc(scaled, beta3)
}

pub fn init_global_layer_norm<R: Rng>(init: &mut ParamInit<R>, prefix: &str, dim: usize) {
    init.constant(&format!("{prefix}.scale"), &[dim], 1.0);
    init.constant(&format!("{prefix}.bias"), &[dim], 0.0);
}

/// Sanity helper used by initialization code paths.
pub fn ensure_block_spec(spec: &BlockSpec) {
    assert!(spec.dim % spec.norm_groups == 0, "D must be divisible by norm_groups");
    assert!(spec.head_dim % 2 == 0, "head_dim must be even for RoPE");
}
