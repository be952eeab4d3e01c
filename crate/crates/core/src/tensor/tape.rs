use std::collections::HashMap;

use super::ops::{self, Op};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

/// Owns every trainable tensor together with its gradient accumulator.
///
/// Gradients accumulate across [`Gradients::accumulate_into`] calls until
/// [`ParamStore::zero_grad`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. Names are unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.sum_squares())
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) struct Node<S> {
    pub(crate) value: Tensor<S>,
    pub(crate) op: Op<S>,
    pub(crate) requires_grad: bool,
}

/// Records one forward pass. Consumed by [`Tape::backward`].
pub struct Tape<S> {
    pub(crate) nodes: Vec<Node<S>>,
    param_leaves: Vec<(ParamId, Var)>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_leaves: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Repeated requests for the same id
    /// return the same node, so a parameter used in several places has a
    /// single gradient slot on the tape.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_leaves.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push_raw(store.value(id).clone(), Op::Leaf, true);
        self.param_leaves.push((id, v));
        v
    }

    fn push_raw(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    /// Reverse sweep from a scalar loss. Every node is visited once, in
    /// reverse recording order.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                ops::backward(&self.nodes, i, &g, &mut grads);
            }
        }
        Ok(Gradients {
            grads,
            param_leaves: self.param_leaves,
        })
    }

    /// Backward followed by accumulation into the store.
    pub fn backward_into(self, loss: Var, store: &mut ParamStore<S>) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    param_leaves: Vec<(ParamId, Var)>,
}

impl<S: Real> Gradients<S> {
    /// Gradient of a leaf, `None` when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<S>) {
        for &(id, v) in &self.param_leaves {
            if let Some(g) = &self.grads[v.0] {
                store.params[id.0].grad.add_assign(g);
            }
        }
    }
}
