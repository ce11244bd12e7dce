//! Named parameter tensors and their per-forward graph binding.

use indexmap::IndexMap;
use ndarray::IxDyn;
use rand::Rng;

use crate::autograd::{Arr, Graph, Var};

/// Ordered map of named parameter tensors. Insertion order is the
/// serialization order of checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    pub tensors: IndexMap<String, Arr>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        let name = name.into();
        assert!(
            self.tensors.insert(name.clone(), value).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Snap every value to f32 precision, matching the checkpoint dtype.
    pub fn quantize_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

/// Initializer producing f32-representable values so that a freshly
/// initialized model round-trips bit-exactly through a checkpoint.
pub struct ParamInit<'a, R: Rng> {
    pub params: &'a mut ParamSet,
    pub rng: &'a mut R,
}

impl<'a, R: Rng> ParamInit<'a, R> {
    pub fn new(params: &'a mut ParamSet, rng: &'a mut R) -> Self {
        Self { params, rng }
    }

    /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let vals: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| (self.rng.gen_range(-bound..bound) as f32) as f64)
            .collect();
        self.params
            .insert(name, Arr::from_shape_vec(IxDyn(shape), vals).unwrap());
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.params
            .insert(name, Arr::from_elem(IxDyn(shape), value as f32 as f64));
    }
}

/// All parameters of a [`ParamSet`] inserted as leaves of one graph.
pub struct Bind {
    vars: IndexMap<String, Var>,
}

impl Bind {
    pub fn new(graph: &mut Graph, params: &ParamSet) -> Self {
        let mut vars = IndexMap::with_capacity(params.tensors.len());
        for (name, value) in &params.tensors {
            vars.insert(name.clone(), graph.leaf(value.clone()));
        }
        Bind { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Gradients keyed by parameter name; parameters that did not influence
    /// the loss are omitted.
    pub fn grads(&self, node_grads: &mut [Option<Arr>]) -> IndexMap<String, Arr> {
        let mut out = IndexMap::new();
        for (name, var) in &self.vars {
            if let Some(g) = node_grads[var.0].take() {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}
