//! Parameter storage, the forward context, and the small layers every
//! model component is assembled from.
//!
//! Layers hold only [`ParamId`]s, so one architecture description drives
//! both `f32` training and `f64` gradient checks.

use std::cell::{Cell, RefCell};

use crate::engine::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Parameter(format!("no parameter named {name}")))?;
        self.set(id, value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Adds named, initialized parameters to a store.
pub struct Builder<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut Rng,
}

impl<T: Scalar> Builder<'_, T> {
    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(rng.uniform_in(-bound, bound)));
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, T::lit(value)))
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let weight = self.uniform(&format!("{name}.weight"), &[fan_in, fan_out], fan_in);
        let bias = bias.then(|| self.uniform(&format!("{name}.bias"), &[fan_out], fan_in));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn mlp(&mut self, name: &str, fan_in: usize, hidden: usize, fan_out: usize, bias: bool) -> Mlp {
        Mlp {
            first: self.linear(&format!("{name}.0"), fan_in, hidden, bias),
            second: self.linear(&format!("{name}.1"), hidden, fan_out, bias),
        }
    }

    pub fn layer_norm(&mut self, name: &str, width: usize) -> LayerNorm {
        LayerNorm {
            gain: self.constant(&format!("{name}.gain"), &[width], 1.0),
            bias: self.constant(&format!("{name}.bias"), &[width], 0.0),
        }
    }
}

/// Per-layer intermediate values kept for inspection.
#[derive(Debug, Clone, Default)]
pub struct LayerTrace<T: Scalar> {
    /// Slice assignment matrix, `N×M`.
    pub assignment: Option<Tensor<T>>,
    /// Spatial gate activations, `N×C`.
    pub gate: Option<Tensor<T>>,
}

/// Everything a forward pass needs besides the inputs: bound parameters,
/// the train/eval switch, the dropout stream and optional inspection traces.
pub struct Forward<'t, T: Scalar> {
    tape: &'t Tape<T>,
    params: Vec<Var<'t, T>>,
    pub training: bool,
    rng: RefCell<Rng>,
    traces: Option<RefCell<Vec<LayerTrace<T>>>>,
    dead_slices: Cell<usize>,
}

impl<'t, T: Scalar> Forward<'t, T> {
    /// Binds every parameter in `store` as a leaf of `tape`.
    pub fn new(tape: &'t Tape<T>, store: &ParamStore<T>, training: bool, seed: u64) -> Self {
        let params = store.values.iter().map(|v| tape.leaf(v.clone())).collect();
        Self::from_vars(tape, params, training, seed)
    }

    /// Uses caller-provided parameter values (e.g. for gradient checks).
    pub fn from_vars(tape: &'t Tape<T>, params: Vec<Var<'t, T>>, training: bool, seed: u64) -> Self {
        Forward {
            tape,
            params,
            training,
            rng: RefCell::new(Rng::new(seed)),
            traces: None,
            dead_slices: Cell::new(0),
        }
    }

    /// Keeps per-layer assignment matrices and gate activations.
    pub fn with_traces(mut self) -> Self {
        self.traces = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn param(&self, id: ParamId) -> &Var<'t, T> {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Var<'t, T>] {
        &self.params
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(value)
    }

    pub fn dropout(&self, x: &Var<'t, T>, rate: f64) -> Result<Var<'t, T>> {
        x.dropout(rate, &mut self.rng.borrow_mut(), self.training)
    }

    pub(crate) fn note_dead_slices(&self, count: usize) {
        self.dead_slices.set(self.dead_slices.get() + count);
    }

    /// Slices whose assignment mass fell below the floor during this pass.
    pub fn dead_slices(&self) -> usize {
        self.dead_slices.get()
    }

    pub(crate) fn trace(&self, layer: usize, f: impl FnOnce(&mut LayerTrace<T>)) {
        if let Some(traces) = &self.traces {
            let mut traces = traces.borrow_mut();
            if traces.len() <= layer {
                traces.resize_with(layer + 1, LayerTrace::default);
            }
            f(&mut traces[layer]);
        }
    }

    pub fn take_traces(&self) -> Vec<LayerTrace<T>> {
        self.traces
            .as_ref()
            .map(|t| std::mem::take(&mut *t.borrow_mut()))
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn forward<'t, T: Scalar>(&self, ctx: &Forward<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(ctx.param(self.weight))?;
        match self.bias {
            Some(b) => y.add(ctx.param(b)),
            None => Ok(y),
        }
    }

    pub fn param_count(fan_in: usize, fan_out: usize, bias: bool) -> usize {
        fan_in * fan_out + if bias { fan_out } else { 0 }
    }
}

/// Two-layer perceptron with GELU between the layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn forward<'t, T: Scalar>(&self, ctx: &Forward<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.first.forward(ctx, x)?.gelu();
        self.second.forward(ctx, &h)
    }

    pub fn param_count(fan_in: usize, hidden: usize, fan_out: usize, bias: bool) -> usize {
        Linear::param_count(fan_in, hidden, bias) + Linear::param_count(hidden, fan_out, bias)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward<'t, T: Scalar>(&self, ctx: &Forward<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(ctx.param(self.gain), ctx.param(self.bias), LAYER_NORM_EPS)
    }
}
