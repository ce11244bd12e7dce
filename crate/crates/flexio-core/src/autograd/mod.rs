//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Graph`] records a tape of operations as they execute. Heavy composite
//! operations (attention, ConvSwiGLU, iSTFT) are single tape nodes that
//! recompute their intermediates during the backward pass, which keeps peak
//! memory proportional to the number of layer boundaries rather than to the
//! number of elementary arithmetic steps.

mod attention;
mod conv;
mod norm;
mod swiglu;

pub use attention::{attention_weights, AttentionSpec};
pub use conv::{conv1d_backward, conv1d_forward, conv2d_backward, conv2d_forward};
pub use norm::{rms_group_norm_backward, rms_group_norm_forward};
pub use swiglu::SwigluSpec;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

/// Dense f64 tensor of dynamic rank.
pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&Graph, &Arr, Var) -> Vec<Arr>>;

pub(crate) struct Node {
    value: Arr,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Tape of recorded operations.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true }
    }

    /// A graph that records values only; `backward` is unavailable but
    /// forward passes skip all bookkeeping needed for gradients.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    /// Differentiable leaf (e.g. a model parameter).
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, vec![], None, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, vec![], None, false)
    }

    fn push(
        &mut self,
        value: Arr,
        parents: Vec<Var>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        debug_assert!(value.iter().all(|x| x.is_finite()), "non-finite tensor on tape");
        let requires_grad = requires_grad && self.grad_enabled;
        let backward = if requires_grad { backward } else { None };
        self.nodes.push(Node { value, parents, backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    pub(crate) fn op(
        &mut self,
        value: Arr,
        parents: Vec<Var>,
        backward: BackwardFn,
    ) -> Var {
        let rg = self.any_grad(&parents);
        self.push(value, parents, Some(backward), rg)
    }

    /// Reverse pass from a scalar node. Returns per-node gradients; only
    /// leaves that influenced `loss` hold `Some`.
    pub fn backward(&self, loss: Var) -> Vec<Option<Arr>> {
        assert!(self.grad_enabled, "backward on an inference graph");
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Arr>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Arr::ones(self.nodes[loss.0].value.raw_dim()));
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let Some(back) = &self.nodes[id].backward else { continue };
            let g = grads[id].take().unwrap();
            let parent_grads = back(self, &g, Var(id));
            debug_assert_eq!(parent_grads.len(), self.nodes[id].parents.len());
            for (p, pg) in self.nodes[id].parents.clone().into_iter().zip(parent_grads) {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        grads
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) + self.value(b);
        self.op(v, vec![a, b], Box::new(|_, g, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) - self.value(b);
        self.op(v, vec![a, b], Box::new(|_, g, _| vec![g.clone(), g.mapv(|x| -x)]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) * self.value(b);
        self.op(
            v,
            vec![a, b],
            Box::new(|g_, g, id| {
                let (a, b) = (g_.parent(id, 0), g_.parent(id, 1));
                vec![g * g_.value(b), g * g_.value(a)]
            }),
        )
    }

    /// Elementwise multiply where `b` broadcasts to `a`'s shape
    /// (same rank, each axis of `b` either matches or is 1).
    pub fn mul_bc(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * &self.value(b).broadcast(self.value(a).raw_dim()).unwrap();
        self.op(
            v,
            vec![a, b],
            Box::new(|g_, g, id| {
                let (a, b) = (g_.parent(id, 0), g_.parent(id, 1));
                let bb = g_.value(b).broadcast(g_.value(a).raw_dim()).unwrap();
                let da = g * &bb;
                let db = reduce_to_shape(&(g * g_.value(a)), g_.value(b).shape());
                vec![da, db]
            }),
        )
    }

    /// Elementwise add where `b` broadcasts to `a`'s shape.
    pub fn add_bc(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + &self.value(b).broadcast(self.value(a).raw_dim()).unwrap();
        self.op(
            v,
            vec![a, b],
            Box::new(|g_, g, id| {
                let b = g_.parent(id, 1);
                vec![g.clone(), reduce_to_shape(g, g_.value(b).shape())]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.op(v, vec![a], Box::new(move |_, g, _| vec![g.mapv(|x| x * c)]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.op(v, vec![a], Box::new(|_, g, _| vec![g.clone()]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.op(
            v,
            vec![a],
            Box::new(|g_, g, id| {
                let a = g_.parent(id, 0);
                let mask = g_.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![g * &mask]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.op(
            v,
            vec![a],
            Box::new(|g_, g, id| {
                let y = &g_.nodes[id.0].value;
                vec![g * &y.mapv(|s| s * (1.0 - s))]
            }),
        )
    }

    /// x^(-1/2); inputs must be positive.
    pub fn rsqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / x.sqrt());
        self.op(
            v,
            vec![a],
            Box::new(|g_, g, id| {
                let y = &g_.nodes[id.0].value;
                vec![g * &y.mapv(|r| -0.5 * r * r * r)]
            }),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.op(
            v,
            vec![a],
            Box::new(|g_, g, id| {
                let a = g_.parent(id, 0);
                vec![g / g_.value(a)]
            }),
        )
    }

    // ----- reductions / shape -----

    pub fn sum_axis_keep(&mut self, a: Var, axis: usize) -> Var {
        let v = self.value(a).sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.op(
            v,
            vec![a],
            Box::new(move |g_, g, id| {
                let a = g_.parent(id, 0);
                vec![g.broadcast(g_.value(a).raw_dim()).unwrap().to_owned()]
            }),
        )
    }

    pub fn mean_axis_keep(&mut self, a: Var, axis: usize) -> Var {
        let n = self.value(a).shape()[axis] as f64;
        let s = self.sum_axis_keep(a, axis);
        self.scale(s, 1.0 / n)
    }

    /// Sum of all elements, yielding shape [1].
    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ndarray::arr1(&[self.value(a).sum()]).into_dyn();
        self.op(
            v,
            vec![a],
            Box::new(|g_, g, id| {
                let a = g_.parent(id, 0);
                vec![Arr::from_elem(g_.value(a).raw_dim(), g[[0]])]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        // Standardize layout first: values may be non-contiguous after
        // upstream ops, and a raw reshape requires contiguous storage.
        let v = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.op(
            v,
            vec![a],
            Box::new(|g_, g, id| {
                let a = g_.parent(id, 0);
                vec![g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(g_.value(a).raw_dim())
                    .unwrap()]
            }),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.op(
            v,
            vec![a],
            Box::new(move |_, g, _| {
                vec![g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned()]
            }),
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        let sizes: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[axis]).collect();
        self.op(
            v,
            parts.to_vec(),
            Box::new(move |_, g, _| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut at = 0isize;
                for &s in &sizes {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::from(at..at + s as isize))
                        .to_owned();
                    out.push(piece);
                    at += s as isize;
                }
                out
            }),
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start as isize..end as isize))
            .as_standard_layout()
            .into_owned();
        self.op(
            v,
            vec![a],
            Box::new(move |g_, g, id| {
                let a = g_.parent(id, 0);
                let mut da = Arr::zeros(g_.value(a).raw_dim());
                da.slice_axis_mut(Axis(axis), Slice::from(start as isize..end as isize))
                    .assign(g);
                vec![da]
            }),
        )
    }

    /// Broadcast to a larger shape of the same rank.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).broadcast(IxDyn(shape)).expect("broadcast_to").to_owned();
        self.op(
            v,
            vec![a],
            Box::new(|g_, g, id| {
                let a = g_.parent(id, 0);
                vec![reduce_to_shape(g, g_.value(a).shape())]
            }),
        )
    }

    /// 2-D matrix product: [m, k] x [k, n] -> [m, n].
    /// Fused y = a · w + bias with a: [N, K], w: [K, C], bias: [C].
    pub fn matmul_bias(&mut self, a: Var, w: Var, bias: Var) -> Var {
        let av = as2(self.value(a));
        let wv = as2(self.value(w));
        let bv = self.value(bias);
        let mut y = ndarray::Array2::<f64>::zeros((av.nrows(), wv.ncols()));
        ndarray::linalg::general_mat_mul(1.0, &av, &wv, 0.0, &mut y);
        for mut row in y.rows_mut() {
            row.iter_mut().zip(bv.iter()).for_each(|(v, &b)| *v += b);
        }
        self.op(
            y.into_dyn(),
            vec![a, w, bias],
            Box::new(|g_, g, id| {
                let (a, w) = (g_.parent(id, 0), g_.parent(id, 1));
                let av = as2(g_.value(a));
                let wv = as2(g_.value(w));
                let gv = as2(g);
                vec![
                    gv.dot(&wv.t()).into_dyn(),
                    av.t().dot(&gv).into_dyn(),
                    gv.sum_axis(Axis(0)).into_dyn(),
                ]
            }),
        )
    }

    /// Fused PReLU over a [N, C] tensor: y = max(x, 0) + alpha[c] * min(x, 0).
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Var {
        let xv = as2(self.value(x));
        let av = self.value(alpha);
        let al: Vec<f64> = av.iter().copied().collect();
        let mut y = xv.to_owned();
        for mut row in y.rows_mut() {
            row.iter_mut().zip(&al).for_each(|(v, &a)| {
                if *v < 0.0 {
                    *v *= a;
                }
            });
        }
        self.op(
            y.into_dyn(),
            vec![x, alpha],
            Box::new(|g_, g, id| {
                let (x, alpha) = (g_.parent(id, 0), g_.parent(id, 1));
                let xv = as2(g_.value(x));
                let av = g_.value(alpha);
                let al: Vec<f64> = av.iter().copied().collect();
                let gv = as2(g);
                let mut dx = gv.to_owned();
                let mut da = vec![0.0; al.len()];
                for (mut drow, xrow) in dx.rows_mut().into_iter().zip(xv.rows()) {
                    for (c, (d, &xc)) in drow.iter_mut().zip(xrow).enumerate() {
                        if xc < 0.0 {
                            da[c] += *d * xc;
                            *d *= al[c];
                        }
                    }
                }
                vec![dx.into_dyn(), ndarray::Array1::from_vec(da).into_dyn()]
            }),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        let v = av.dot(&bv).into_dyn();
        self.op(
            v,
            vec![a, b],
            Box::new(|g_, g, id| {
                let (a, b) = (g_.parent(id, 0), g_.parent(id, 1));
                let av = as2(g_.value(a));
                let bv = as2(g_.value(b));
                let gv = as2(g);
                vec![gv.dot(&bv.t()).into_dyn(), av.t().dot(&gv).into_dyn()]
            }),
        )
    }

    fn parent(&self, id: Var, i: usize) -> Var {
        self.nodes[id.0].parents[i]
    }
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<ndarray::Ix2>().expect("expected rank-2 tensor")
}

/// Sum `g` down to `shape` (same rank, target axes are 1 or equal).
pub(crate) fn reduce_to_shape(g: &Arr, shape: &[usize]) -> Arr {
    let mut out = g.clone();
    for (ax, (&gs, &ts)) in g.shape().iter().zip(shape).enumerate() {
        if ts == 1 && gs != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_error};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut impl Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// FD-check the gradient of `weights . f(inputs)` w.r.t. every input.
    fn check_grads<F>(seed: u64, inputs: &[Arr], f: F, tol: f64)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let weights = randn(&mut rng, g.value(out).shape());
        let wv = g.constant(weights.clone());
        let prod = g.mul(out, wv);
        let loss = g.sum_all(prod);
        let mut grads = g.backward(loss);

        for (i, x0) in inputs.iter().enumerate() {
            let analytic = grads[vars[i].0]
                .take()
                .unwrap_or_else(|| Arr::zeros(x0.raw_dim()));
            let fd = central_diff(
                |x| {
                    let mut gg = Graph::inference();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, v)| gg.leaf(if j == i { x.clone() } else { v.clone() }))
                        .collect();
                    let out = f(&mut gg, &vs);
                    gg.value(out)
                        .iter()
                        .zip(weights.iter())
                        .map(|(a, b)| a * b)
                        .sum()
                },
                x0,
                1e-5,
            );
            let err = rel_error(&analytic, &fd);
            assert!(err < tol, "input {i}: rel err {err}");
        }
    }

    #[test]
    fn elementwise_and_scalar_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]);
        check_grads(1, &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]), 1e-7);
        check_grads(2, &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]), 1e-7);
        check_grads(3, &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]), 1e-7);
        check_grads(4, &[a.clone()], |g, v| g.scale(v[0], -2.5), 1e-7);
        check_grads(5, &[a.clone()], |g, v| g.add_scalar(v[0], 0.7), 1e-7);
        check_grads(6, &[a.clone()], |g, v| g.sigmoid(v[0]), 1e-6);
        let pos = a.mapv(|x| x.abs() + 0.5);
        check_grads(7, &[pos.clone()], |g, v| g.rsqrt(v[0]), 1e-6);
        check_grads(8, &[pos], |g, v| g.ln(v[0]), 1e-6);
        // relu away from the kink
        let shifted = a.mapv(|x| if x.abs() < 1e-3 { 0.5 } else { x });
        check_grads(9, &[shifted], |g, v| g.relu(v[0]), 1e-6);
    }

    #[test]
    fn broadcast_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, &[2, 3, 4]);
        let b = randn(&mut rng, &[2, 1, 4]);
        check_grads(10, &[a.clone(), b.clone()], |g, v| g.mul_bc(v[0], v[1]), 1e-7);
        check_grads(11, &[a.clone(), b], |g, v| g.add_bc(v[0], v[1]), 1e-7);
        let c = randn(&mut rng, &[1, 3, 1]);
        check_grads(12, &[c], |g, v| g.broadcast_to(v[0], &[2, 3, 4]), 1e-7);
        check_grads(13, &[a.clone()], |g, v| g.sum_axis_keep(v[0], 1), 1e-7);
        check_grads(14, &[a.clone()], |g, v| g.mean_axis_keep(v[0], 2), 1e-7);
        check_grads(15, &[a], |g, v| g.sum_all(v[0]), 1e-7);
    }

    #[test]
    fn shape_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, &[2, 3, 4]);
        check_grads(20, &[a.clone()], |g, v| g.reshape(v[0], &[6, 4]), 1e-7);
        check_grads(21, &[a.clone()], |g, v| g.permute(v[0], &[2, 0, 1]), 1e-7);
        check_grads(22, &[a.clone()], |g, v| g.slice(v[0], 1, 1, 3), 1e-7);
        let b = randn(&mut rng, &[2, 2, 4]);
        check_grads(23, &[a, b], |g, v| g.concat(&[v[0], v[1]], 1), 1e-7);
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&mut rng, &[5, 3]);
        let b = randn(&mut rng, &[3, 4]);
        check_grads(30, &[a, b], |g, v| g.matmul(v[0], v[1]), 1e-7);
    }

    #[test]
    fn matmul_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let a = randn(&mut rng, &[5, 3]);
        let w = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4]);
        check_grads(31, &[a, w, b], |g, v| g.matmul_bias(v[0], v[1], v[2]), 1e-7);
    }

    #[test]
    fn prelu_gradients_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        // keep inputs away from the kink at zero
        let x = randn(&mut rng, &[6, 4]).mapv(|v| if v.abs() < 1e-3 { 0.5 } else { v });
        let alpha = randn(&mut rng, &[4]);
        check_grads(32, &[x.clone(), alpha.clone()], |g, v| g.prelu(v[0], v[1]), 1e-7);
        let mut g = Graph::inference();
        let xv = g.leaf(x.clone());
        let av = g.leaf(alpha.clone());
        let y = g.prelu(xv, av);
        for (i, (&got, &xin)) in g.value(y).iter().zip(x.iter()).enumerate() {
            let a = alpha[[i % 4]];
            assert_eq!(got, xin.max(0.0) + a * xin.min(0.0));
        }
    }

    #[test]
    fn conv1d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[2, 3, 7]);
        let w = randn(&mut rng, &[4, 3, 3]);
        let b = randn(&mut rng, &[4]);
        check_grads(40, &[x, w, b], |g, v| g.conv1d(v[0], v[1], v[2], 1), 1e-6);
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, &[1, 2, 5, 6]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let b = randn(&mut rng, &[3]);
        check_grads(41, &[x, w, b], |g, v| g.conv2d(v[0], v[1], v[2]), 1e-6);
    }

    #[test]
    fn rms_group_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[2, 8, 5]);
        let scale = randn(&mut rng, &[8]);
        let bias = randn(&mut rng, &[8]);
        check_grads(
            50,
            &[x, scale, bias],
            |g, v| g.rms_group_norm(v[0], v[1], v[2], 4, 1e-5),
            1e-6,
        );
    }

    #[test]
    fn attention_gradients_all_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = [2usize, 3, 4, 4]; // [M, B, L, Da]
        let q = randn(&mut rng, &shape);
        let k = randn(&mut rng, &shape);
        let v = randn(&mut rng, &shape);
        for (co, rope) in [(false, false), (false, true), (true, false), (true, true)] {
            let m: f64 = if co { 2.0 } else { 1.0 };
            let spec = AttentionSpec { co, rope, scale: 1.0 / (4.0 * m).sqrt() };
            check_grads(
                60,
                &[q.clone(), k.clone(), v.clone()],
                move |g, vars| g.attention(vars[0], vars[1], vars[2], spec),
                1e-6,
            );
        }
    }

    #[test]
    fn conv_swiglu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (d, hidden, l) = (4usize, 8usize, 6usize);
        let spec = SwigluSpec { kernel: 3, groups: 2, eps: 1e-5 };
        let x = randn(&mut rng, &[2, d, l]);
        let ns = randn(&mut rng, &[d]);
        let nb = randn(&mut rng, &[d]);
        let wa = randn(&mut rng, &[hidden, d, 3]);
        let ba = randn(&mut rng, &[hidden]);
        let wb = randn(&mut rng, &[hidden, d, 3]);
        let bb = randn(&mut rng, &[hidden]);
        let wo = randn(&mut rng, &[d, hidden, 3]);
        let bo = randn(&mut rng, &[d]);
        check_grads(
            70,
            &[x, ns, nb, wa, ba, wb, bb, wo, bo],
            move |g, v| {
                g.conv_swiglu(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], spec)
            },
            1e-5,
        );
    }

    #[test]
    fn backward_accumulates_through_shared_nodes() {
        // y = x * x via two references to the same node.
        let mut g = Graph::new();
        let x = g.leaf(ndarray::arr1(&[3.0]).into_dyn());
        let y = g.mul(x, x);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        assert!((grads[x.0].as_ref().unwrap()[[0]] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn inference_graph_skips_gradients() {
        let mut g = Graph::inference();
        let x = g.leaf(ndarray::arr1(&[2.0]).into_dyn());
        let y = g.mul(x, x);
        assert!((g.value(y)[[0]] - 4.0).abs() < 1e-12);
    }
}
