//! Fused scaled-dot-product attention over batched sequences.
//!
//! Operates on [M, B, L, Da] tensors where M is the microphone-channel axis
//! and B collects all other batch axes (frequency/time positions x heads).
//! With `co` set, the logits of all M channels are summed and the resulting
//! weights are shared across channels; otherwise M x B is a flat batch.
//! Attention weights are never materialized on the tape: the backward pass
//! recomputes them per batch element.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};
use wide::f64x4;

use super::{Graph, Var};

/// Configuration of one fused attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttentionSpec {
    /// Sum logits over the channel axis and share the weights (co-attention).
    pub co: bool,
    /// Apply rotary position encoding to queries and keys.
    pub rope: bool,
    /// Logit scale, e.g. 1/sqrt(Da) or 1/sqrt(Da*M).
    pub scale: f64,
}

const ROPE_BASE: f64 = 10_000.0;

/// cos/sin tables, each [L, Da/2].
fn rope_tables(len: usize, dim: usize) -> (Array2<f64>, Array2<f64>) {
    assert!(dim % 2 == 0, "rope requires an even head dimension");
    let half = dim / 2;
    let mut cos = Array2::<f64>::zeros((len, half));
    let mut sin = Array2::<f64>::zeros((len, half));
    for pos in 0..len {
        for j in 0..half {
            let theta = ROPE_BASE.powf(-2.0 * j as f64 / dim as f64);
            let angle = pos as f64 * theta;
            cos[[pos, j]] = angle.cos();
            sin[[pos, j]] = angle.sin();
        }
    }
    (cos, sin)
}

/// Rotate pairs (2j, 2j+1) of x [L, Da] by position-dependent angles.
/// `sign` of -1 applies the inverse rotation (used for gradients).
fn rope_into(
    x: &ArrayView2<f64>,
    cos: &Array2<f64>,
    sin: &Array2<f64>,
    sign: f64,
    y: &mut Array2<f64>,
) {
    let (l, d) = x.dim();
    for pos in 0..l {
        for j in 0..d / 2 {
            let (c, s) = (cos[[pos, j]], sign * sin[[pos, j]]);
            let (a, b) = (x[[pos, 2 * j]], x[[pos, 2 * j + 1]]);
            y[[pos, 2 * j]] = a * c - b * s;
            y[[pos, 2 * j + 1]] = a * s + b * c;
        }
    }
}

fn rope_apply(x: &ArrayView2<f64>, cos: &Array2<f64>, sin: &Array2<f64>, sign: f64) -> Array2<f64> {
    let (l, d) = x.dim();
    let mut y = Array2::<f64>::zeros((l, d));
    rope_into(x, cos, sin, sign, &mut y);
    y
}

/// Taylor coefficients 1/k! for k = 0..=10, combined with Estrin's scheme on
/// the reduced argument r in [-ln2/2, ln2/2]; worst-case relative error
/// ~2e-13.
const EP: [f64; 11] = [
    1.0,
    1.0,
    0.5,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5_040.0,
    1.0 / 40_320.0,
    1.0 / 362_880.0,
    1.0 / 3_628_800.0,
];
const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;

/// Four-lane exp via power-of-two range reduction. Inputs are clamped at
/// -708 so the 2^n exponent-bit scaling stays in the normal range.
fn fast_exp4(x: f64x4) -> f64x4 {
    let x = x.max(f64x4::splat(-708.0));
    let n = (x * f64x4::splat(std::f64::consts::LOG2_E)).round();
    let r = n.mul_neg_add(f64x4::splat(LN2_HI), x) - n * f64x4::splat(LN2_LO);
    let sp = |c: f64| f64x4::splat(c);
    let b0 = sp(EP[1]).mul_add(r, sp(EP[0]));
    let b1 = sp(EP[3]).mul_add(r, sp(EP[2]));
    let b2 = sp(EP[5]).mul_add(r, sp(EP[4]));
    let b3 = sp(EP[7]).mul_add(r, sp(EP[6]));
    let b4 = sp(EP[9]).mul_add(r, sp(EP[8]));
    let r2 = r * r;
    let c0 = b1.mul_add(r2, b0);
    let c1 = b3.mul_add(r2, b2);
    let c2 = sp(EP[10]).mul_add(r2, b4);
    let r4 = r2 * r2;
    let d0 = c1.mul_add(r4, c0);
    let p = c2.mul_add(r4 * r4, d0);
    let pa = p.to_array();
    let na = n.to_array();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = pa[i] * f64::from_bits(((na[i] as i64 + 1023) << 52) as u64);
    }
    f64x4::from(out)
}

/// Scalar counterpart of [`fast_exp4`] (identical reduction and evaluation
/// order, so the two agree bit for bit).
fn fast_exp(x: f64) -> f64 {
    let x = x.max(-708.0);
    let n = (x * std::f64::consts::LOG2_E).round();
    let r = (-n).mul_add(LN2_HI, x) - n * LN2_LO;
    let b0 = EP[1].mul_add(r, EP[0]);
    let b1 = EP[3].mul_add(r, EP[2]);
    let b2 = EP[5].mul_add(r, EP[4]);
    let b3 = EP[7].mul_add(r, EP[6]);
    let b4 = EP[9].mul_add(r, EP[8]);
    let r2 = r * r;
    let c0 = b1.mul_add(r2, b0);
    let c1 = b3.mul_add(r2, b2);
    let c2 = EP[10].mul_add(r2, b4);
    let r4 = r2 * r2;
    let d0 = c1.mul_add(r4, c0);
    let p = c2.mul_add(r4 * r4, d0);
    p * f64::from_bits(((n as i64 + 1023) << 52) as u64)
}

/// Exponentiate rows in place (max-shifted) and record each row's inverse
/// sum in `inv` instead of making a normalization pass; callers either
/// normalize afterwards ([`softmax_rows`]) or fold `inv` into the next
/// matrix product.
fn softmax_rows_raw(s: &mut Array2<f64>, inv: &mut Vec<f64>) {
    inv.clear();
    for mut row in s.rows_mut() {
        let r = row.as_slice_mut().expect("softmax row not contiguous");
        let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shift = f64x4::splat(mx);
        let mut sum = 0.0;
        let mut chunks = r.chunks_exact_mut(4);
        for c in &mut chunks {
            let e = fast_exp4(f64x4::new([c[0], c[1], c[2], c[3]]) - shift);
            let a = e.to_array();
            c.copy_from_slice(&a);
            sum += a[0] + a[1] + a[2] + a[3];
        }
        for v in chunks.into_remainder() {
            *v = fast_exp(*v - mx);
            sum += *v;
        }
        inv.push(1.0 / sum);
    }
}

fn softmax_rows(s: &mut Array2<f64>, inv: &mut Vec<f64>) {
    softmax_rows_raw(s, inv);
    for (mut row, &iv) in s.rows_mut().into_iter().zip(inv.iter()) {
        for v in row.iter_mut() {
            *v *= iv;
        }
    }
}

#[cfg(test)]
mod exp_tests {
    use super::*;

    #[test]
    fn fast_exp_matches_std_exp_closely() {
        for i in 0..100_000 {
            let x = -50.0 + i as f64 * 1e-3; // [-50, 50]
            let got = fast_exp(x);
            let want = x.exp();
            assert!(
                ((got - want) / want).abs() < 1e-12,
                "x={x}: {got} vs {want}"
            );
            let v = fast_exp4(f64x4::splat(x)).to_array();
            assert_eq!(v[0], got);
        }
        assert!(fast_exp(-800.0) > 0.0); // clamp keeps the scale normal
        assert!(fast_exp(-708.0) < 1e-300);
    }
}

/// Per-call scratch: rotation tables plus reusable [L, L] and [L, Da]
/// buffers, so the per-batch-element loops do not allocate.
struct AttCtx {
    cos: Array2<f64>,
    sin: Array2<f64>,
    s: Array2<f64>,
    qr: Array2<f64>,
    kr: Array2<f64>,
    kt: Array2<f64>,
    inv: Vec<f64>,
    buf: Vec<f64>,
}

impl AttCtx {
    fn new(l: usize, d: usize) -> Self {
        let (cos, sin) = rope_tables(l, d);
        AttCtx {
            cos,
            sin,
            s: Array2::zeros((l, l)),
            qr: Array2::zeros((l, d)),
            kr: Array2::zeros((l, d)),
            kt: Array2::zeros((d, l)),
            inv: Vec::with_capacity(l),
            buf: vec![0.0; l],
        }
    }
}

/// One-pass attention for 4-dimensional heads: per query row the scores are
/// computed into `buf`, exponentiated, and folded into the value rows
/// without ever materializing the [L, L] weight matrix.
fn fused_attention4(
    scale: f64,
    q: &ArrayView2<f64>,
    kt: &Array2<f64>,
    vs: &[f64],
    out: &mut ndarray::ArrayViewMut2<f64>,
    buf: &mut [f64],
) {
    let (l, d) = q.dim();
    debug_assert_eq!(d, 4);
    let rows: Vec<&[f64]> = (0..4).map(|dim| kt.row(dim).to_slice().unwrap()).collect();
    let (k0, k1, k2, k3) = (rows[0], rows[1], rows[2], rows[3]);
    let os = out.as_slice_mut().unwrap();
    for i in 0..l {
        let qr = q.row(i);
        let c = [scale * qr[0], scale * qr[1], scale * qr[2], scale * qr[3]];
        let (c0, c1, c2, c3) = (
            f64x4::splat(c[0]),
            f64x4::splat(c[1]),
            f64x4::splat(c[2]),
            f64x4::splat(c[3]),
        );
        let mut mx4 = f64x4::splat(f64::NEG_INFINITY);
        let mut mx = f64::NEG_INFINITY;
        let mut j = 0;
        while j + 4 <= l {
            let acc = c0.mul_add(
                f64x4::new([k0[j], k0[j + 1], k0[j + 2], k0[j + 3]]),
                c1.mul_add(
                    f64x4::new([k1[j], k1[j + 1], k1[j + 2], k1[j + 3]]),
                    c2.mul_add(
                        f64x4::new([k2[j], k2[j + 1], k2[j + 2], k2[j + 3]]),
                        c3 * f64x4::new([k3[j], k3[j + 1], k3[j + 2], k3[j + 3]]),
                    ),
                ),
            );
            mx4 = mx4.max(acc);
            buf[j..j + 4].copy_from_slice(&acc.to_array());
            j += 4;
        }
        for &m in &mx4.to_array() {
            mx = mx.max(m);
        }
        while j < l {
            let dot = c[0].mul_add(k0[j], c[1].mul_add(k1[j], c[2].mul_add(k2[j], c[3] * k3[j])));
            buf[j] = dot;
            mx = mx.max(dot);
            j += 1;
        }
        let shift = f64x4::splat(mx);
        let mut sum = 0.0;
        // Four independent accumulators keep the fma chains short.
        let mut acc = [f64x4::splat(0.0); 4];
        j = 0;
        while j + 4 <= l {
            let e = fast_exp4(f64x4::new([buf[j], buf[j + 1], buf[j + 2], buf[j + 3]]) - shift);
            let ea = e.to_array();
            sum += (ea[0] + ea[1]) + (ea[2] + ea[3]);
            for (t, &w) in ea.iter().enumerate() {
                let vr = &vs[4 * (j + t)..4 * (j + t) + 4];
                acc[t] = f64x4::splat(w).mul_add(f64x4::new([vr[0], vr[1], vr[2], vr[3]]), acc[t]);
            }
            j += 4;
        }
        while j < l {
            let w = fast_exp(buf[j] - mx);
            sum += w;
            let vr = &vs[4 * j..4 * j + 4];
            acc[0] = f64x4::splat(w).mul_add(f64x4::new([vr[0], vr[1], vr[2], vr[3]]), acc[0]);
            j += 1;
        }
        let total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        let total = total * f64x4::splat(1.0 / sum);
        os[4 * i..4 * i + 4].copy_from_slice(&total.to_array());
    }
}

fn transpose_into(src: &ArrayView2<f64>, dst: &mut Array2<f64>) {
    let (l, d) = src.dim();
    for dim in 0..d {
        let mut row = dst.row_mut(dim);
        let row = row.as_slice_mut().unwrap();
        for j in 0..l {
            row[j] = src[[j, dim]];
        }
    }
}

/// s[i, :] (+)= scale * Σ_dim q[i, dim] · kt[dim, :], unrolled for the
/// 4-dimensional heads used throughout; avoids gemm packing overhead at
/// this tiny inner dimension.
fn scores4_into(scale: f64, q: &ArrayView2<f64>, kt: &Array2<f64>, beta: f64, s: &mut Array2<f64>) {
    let (l, d) = q.dim();
    debug_assert_eq!(d, 4);
    let rows: Vec<&[f64]> = (0..4).map(|dim| kt.row(dim).to_slice().unwrap()).collect();
    let (k0, k1, k2, k3) = (rows[0], rows[1], rows[2], rows[3]);
    for i in 0..l {
        let qr = q.row(i);
        let c = [scale * qr[0], scale * qr[1], scale * qr[2], scale * qr[3]];
        let (c0, c1, c2, c3) = (
            f64x4::splat(c[0]),
            f64x4::splat(c[1]),
            f64x4::splat(c[2]),
            f64x4::splat(c[3]),
        );
        let mut srow = s.row_mut(i);
        let sr = srow.as_slice_mut().unwrap();
        let mut j = 0;
        while j + 4 <= l {
            let acc = c0 * f64x4::new([k0[j], k0[j + 1], k0[j + 2], k0[j + 3]])
                + c1 * f64x4::new([k1[j], k1[j + 1], k1[j + 2], k1[j + 3]])
                + c2 * f64x4::new([k2[j], k2[j + 1], k2[j + 2], k2[j + 3]])
                + c3 * f64x4::new([k3[j], k3[j + 1], k3[j + 2], k3[j + 3]]);
            let a = if beta == 0.0 {
                acc.to_array()
            } else {
                (acc + f64x4::new([sr[j], sr[j + 1], sr[j + 2], sr[j + 3]])).to_array()
            };
            sr[j..j + 4].copy_from_slice(&a);
            j += 4;
        }
        while j < l {
            let dot = c[0] * k0[j] + c[1] * k1[j] + c[2] * k2[j] + c[3] * k3[j];
            sr[j] = if beta == 0.0 { dot } else { sr[j] + dot };
            j += 1;
        }
    }
}

/// out[i, :] = inv[i] · Σ_j s[i, j] · v[j, :] for 4-wide value rows; `s`
/// holds unnormalized softmax weights and `inv` the per-row inverse sums.
fn weighted_sum4(
    s: &Array2<f64>,
    inv: &[f64],
    v: &ArrayView2<f64>,
    out: &mut ndarray::ArrayViewMut2<f64>,
) {
    let (l, d) = v.dim();
    debug_assert_eq!(d, 4);
    let vs = v.to_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for i in 0..l {
        let sr = s.row(i);
        let sr = sr.to_slice().unwrap();
        let mut acc = f64x4::splat(0.0);
        for (j, &w) in sr.iter().enumerate() {
            let vr = &vs[4 * j..4 * j + 4];
            acc += f64x4::splat(w) * f64x4::new([vr[0], vr[1], vr[2], vr[3]]);
        }
        acc *= f64x4::splat(inv[i]);
        os[4 * i..4 * i + 4].copy_from_slice(&acc.to_array());
    }
}

/// Fill `ctx.s` with the row-stochastic attention weights for batch element
/// `b` (channel `m` unless `spec.co` sums logits over all channels).
fn weights_for(
    ctx: &mut AttCtx,
    q: &ArrayView4<f64>,
    k: &ArrayView4<f64>,
    spec: AttentionSpec,
    m: usize,
    b: usize,
    normalize: bool,
) {
    let (mm, _, _, _) = q.dim();
    let channels: Vec<usize> = if spec.co { (0..mm).collect() } else { vec![m] };
    for (i, &mi) in channels.iter().enumerate() {
        let beta = if i == 0 { 0.0 } else { 1.0 };
        let qv = q.index_axis(Axis(0), mi);
        let qv = qv.index_axis(Axis(0), b);
        let kv = k.index_axis(Axis(0), mi);
        let kv = kv.index_axis(Axis(0), b);
        let d = qv.dim().1;
        if spec.rope {
            // Split-borrow the scratch buffers around the matmul call.
            let AttCtx { cos, sin, s, qr, kr, kt, .. } = ctx;
            rope_into(&qv, cos, sin, 1.0, qr);
            rope_into(&kv, cos, sin, 1.0, kr);
            if d == 4 {
                transpose_into(&kr.view(), kt);
                scores4_into(spec.scale, &qr.view(), kt, beta, s);
            } else {
                general_mat_mul(spec.scale, qr, &kr.t(), beta, s);
            }
        } else if d == 4 {
            let AttCtx { s, kt, .. } = ctx;
            transpose_into(&kv, kt);
            scores4_into(spec.scale, &qv, kt, beta, s);
        } else {
            general_mat_mul(spec.scale, &qv, &kv.t(), beta, &mut ctx.s);
        }
    }
    if normalize {
        softmax_rows(&mut ctx.s, &mut ctx.inv);
    } else {
        softmax_rows_raw(&mut ctx.s, &mut ctx.inv);
    }
}

fn attention_forward(
    q: &ArrayView4<f64>,
    k: &ArrayView4<f64>,
    v: &ArrayView4<f64>,
    spec: AttentionSpec,
) -> Array4<f64> {
    let (m, b, l, d) = q.dim();
    let mut ctx = AttCtx::new(l, d);
    let mut out = Array4::<f64>::zeros((m, b, l, d));
    for bi in 0..b {
        if spec.co {
            let fast = d == 4 && contiguous_values(v, bi);
            weights_for(&mut ctx, q, k, spec, 0, bi, !fast);
            for mi in 0..m {
                let vm = v.index_axis(Axis(0), mi);
                let vv = vm.index_axis(Axis(0), bi);
                let mut om = out.index_axis_mut(Axis(0), mi);
                let mut ob = om.index_axis_mut(Axis(0), bi);
                if fast {
                    weighted_sum4(&ctx.s, &ctx.inv, &vv, &mut ob);
                } else {
                    general_mat_mul(1.0, &ctx.s, &vv, 0.0, &mut ob);
                }
            }
        } else {
            for mi in 0..m {
                let qm = q.index_axis(Axis(0), mi);
                let qv = qm.index_axis(Axis(0), bi);
                let km = k.index_axis(Axis(0), mi);
                let kv = km.index_axis(Axis(0), bi);
                let vm = v.index_axis(Axis(0), mi);
                let vv = vm.index_axis(Axis(0), bi);
                let mut om = out.index_axis_mut(Axis(0), mi);
                let mut ob = om.index_axis_mut(Axis(0), bi);
                if d == 4 && vv.to_slice().is_some() {
                    let AttCtx { cos, sin, qr, kr, kt, buf, .. } = &mut ctx;
                    if spec.rope {
                        rope_into(&qv, cos, sin, 1.0, qr);
                        rope_into(&kv, cos, sin, 1.0, kr);
                        transpose_into(&kr.view(), kt);
                        fused_attention4(spec.scale, &qr.view(), kt, vv.to_slice().unwrap(), &mut ob, buf);
                    } else {
                        transpose_into(&kv, kt);
                        fused_attention4(spec.scale, &qv, kt, vv.to_slice().unwrap(), &mut ob, buf);
                    }
                } else {
                    weights_for(&mut ctx, q, k, spec, mi, bi, true);
                    general_mat_mul(1.0, &ctx.s, &vv, 0.0, &mut ob);
                }
            }
        }
    }
    out
}

/// True when every channel's [L, Da] value slab for batch element `b` is
/// contiguous (required by the fused kernel).
fn contiguous_values(v: &ArrayView4<f64>, b: usize) -> bool {
    let m = v.dim().0;
    (0..m).all(|mi| v.index_axis(Axis(0), mi).index_axis(Axis(0), b).to_slice().is_some())
}

/// dS from dA with A = softmax(S): dS = A * (dA - rowsum(dA * A)).
fn softmax_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let mut ds = da * a;
    for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
        let dot = row.sum();
        row.iter_mut().zip(arow).for_each(|(r, &av)| *r -= av * dot);
    }
    ds
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &ArrayView4<f64>,
    k: &ArrayView4<f64>,
    v: &ArrayView4<f64>,
    dy: &ArrayView4<f64>,
    spec: AttentionSpec,
) -> (Array4<f64>, Array4<f64>, Array4<f64>) {
    let (m, b, l, d) = q.dim();
    let (cos, sin) = rope_tables(l, d);
    let maybe_rot = |x: &ArrayView2<f64>, sign: f64| {
        if spec.rope { rope_apply(x, &cos, &sin, sign) } else { x.to_owned() }
    };
    let mut ctx = AttCtx::new(l, d);
    let mut dq = Array4::<f64>::zeros((m, b, l, d));
    let mut dk = Array4::<f64>::zeros((m, b, l, d));
    let mut dv = Array4::<f64>::zeros((m, b, l, d));
    for bi in 0..b {
        if spec.co {
            weights_for(&mut ctx, q, k, spec, 0, bi, true);
            let a = ctx.s.clone();
            // Shared weights: accumulate dA over channels first.
            let mut da = Array2::<f64>::zeros((l, l));
            for mi in 0..m {
                let dym = dy.index_axis(Axis(0), mi);
                let dyv = dym.index_axis(Axis(0), bi);
                let vm = v.index_axis(Axis(0), mi);
                let vv = vm.index_axis(Axis(0), bi);
                da += &dyv.dot(&vv.t());
                dv.index_axis_mut(Axis(0), mi)
                    .index_axis_mut(Axis(0), bi)
                    .assign(&a.t().dot(&dyv));
            }
            let mut ds = softmax_backward(&a, &da);
            ds.mapv_inplace(|x| x * spec.scale);
            for mi in 0..m {
                let qr = maybe_rot(&q.index_axis(Axis(0), mi).index_axis(Axis(0), bi), 1.0);
                let kr = maybe_rot(&k.index_axis(Axis(0), mi).index_axis(Axis(0), bi), 1.0);
                let dqr = ds.dot(&kr);
                let dkr = ds.t().dot(&qr);
                dq.index_axis_mut(Axis(0), mi)
                    .index_axis_mut(Axis(0), bi)
                    .assign(&maybe_rot(&dqr.view(), -1.0));
                dk.index_axis_mut(Axis(0), mi)
                    .index_axis_mut(Axis(0), bi)
                    .assign(&maybe_rot(&dkr.view(), -1.0));
            }
        } else {
            for mi in 0..m {
                weights_for(&mut ctx, q, k, spec, mi, bi, true);
                let a = &ctx.s;
                let dym = dy.index_axis(Axis(0), mi);
                let dyv = dym.index_axis(Axis(0), bi);
                let vm = v.index_axis(Axis(0), mi);
                let vv = vm.index_axis(Axis(0), bi);
                let da = dyv.dot(&vv.t());
                dv.index_axis_mut(Axis(0), mi)
                    .index_axis_mut(Axis(0), bi)
                    .assign(&a.t().dot(&dyv));
                let mut ds = softmax_backward(a, &da);
                ds.mapv_inplace(|x| x * spec.scale);
                let qr = maybe_rot(&q.index_axis(Axis(0), mi).index_axis(Axis(0), bi), 1.0);
                let kr = maybe_rot(&k.index_axis(Axis(0), mi).index_axis(Axis(0), bi), 1.0);
                dq.index_axis_mut(Axis(0), mi)
                    .index_axis_mut(Axis(0), bi)
                    .assign(&maybe_rot(&ds.dot(&kr).view(), -1.0));
                dk.index_axis_mut(Axis(0), mi)
                    .index_axis_mut(Axis(0), bi)
                    .assign(&maybe_rot(&ds.t().dot(&qr).view(), -1.0));
            }
        }
    }
    (dq, dk, dv)
}

/// Attention weights for inspection in tests and analyses (not on the tape).
/// Returns the [L, L] row-stochastic matrix for batch element `b`
/// (channel `m` when not in co mode).
pub fn attention_weights(
    q: &ArrayView4<f64>,
    k: &ArrayView4<f64>,
    spec: AttentionSpec,
    m: usize,
    b: usize,
) -> Array2<f64> {
    let (_, _, l, d) = q.dim();
    let mut ctx = AttCtx::new(l, d);
    weights_for(&mut ctx, q, k, spec, m, b, true);
    ctx.s
}

impl Graph {
    /// Fused multi-head attention core; q, k, v: [M, B, L, Da].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let qv = self.value(q).view().into_dimensionality().unwrap();
        let kv = self.value(k).view().into_dimensionality().unwrap();
        let vv = self.value(v).view().into_dimensionality().unwrap();
        let y = attention_forward(&qv, &kv, &vv, spec).into_dyn();
        self.op(
            y,
            vec![q, k, v],
            Box::new(move |g_, g, id| {
                let (q, k, v) = (g_.parent(id, 0), g_.parent(id, 1), g_.parent(id, 2));
                let qv = g_.value(q).view().into_dimensionality().unwrap();
                let kv = g_.value(k).view().into_dimensionality().unwrap();
                let vv = g_.value(v).view().into_dimensionality().unwrap();
                let dyv = g.view().into_dimensionality().unwrap();
                let (dq, dk, dv) = attention_backward(&qv, &kv, &vv, &dyv, spec);
                vec![dq.into_dyn(), dk.into_dyn(), dv.into_dyn()]
            }),
        )
    }
}
