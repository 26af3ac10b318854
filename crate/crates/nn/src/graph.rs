//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every value computed during a forward pass together
//! with the operation that produced it. Nodes are appended in evaluation
//! order, so walking the tape backwards is a valid topological order for
//! gradient propagation.

use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::kernels::ConvGeom;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddChannel(Var, Var),
    AddNc(Var, Var),
    MulNc(Var, Var),
    AddBroadcast(Var, Var),
    Linear(Var, Var, Option<Var>),
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Silu(Var),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Upsample2x(Var),
    AvgPool2x(Var),
    MaxPool2x { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<T> },
    SumAll(Var),
    MeanAll(Var),
    Mse(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    LogProbSum { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    SumSquares(Var),
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    grad_enabled: bool,
    training: bool,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph that records operations for differentiation.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, training: false, params: HashMap::new() }
    }

    /// Graph for pure evaluation: parameters do not require gradients and
    /// only inputs created with [`Graph::input_grad`] are differentiable.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    /// Enables training-only behaviour such as dropout.
    pub fn train_mode(mut self, on: bool) -> Self {
        self.training = on;
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient will be reported by [`Graph::backward`].
    pub fn input_grad(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, self.grad_enabled);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, leaf_grad: bool) -> Var {
        let requires_grad = match &op {
            Op::Leaf => leaf_grad,
            _ => op_inputs(&op).iter().any(|&p| self.nodes[p.0].requires_grad),
        };
        // Nothing downstream can ask for a gradient, so drop saved state.
        let op = if requires_grad || matches!(op, Op::Leaf) { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(NnError::ShapeMismatch(format!(
                "backward from non-scalar of shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaves: HashMap<Var, Tensor<T>> = HashMap::new();
        grads[loss.0] = Some(Tensor::ones(root.shape()));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                leaves.insert(Var(i), gout);
                continue;
            }
            self.backward_op(Var(i), gout, &mut grads)?;
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { leaves, params })
    }
}

pub(crate) fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    use Op::*;
    match op {
        Leaf => vec![],
        Add(a, b) | Sub(a, b) | Mul(a, b) | AddChannel(a, b) | AddNc(a, b) | MulNc(a, b)
        | AddBroadcast(a, b) | Mse(a, b) => vec![*a, *b],
        Scale(a, _) | AddScalar(a) | Silu(a) | Relu(a) | Sigmoid(a) | Gelu(a) | Reshape(a)
        | Upsample2x(a) | AvgPool2x(a) | GlobalAvgPool(a) | SumAll(a) | MeanAll(a)
        | SumSquares(a) => vec![*a],
        Linear(x, w, b) => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Bmm { a, b, .. } => vec![*a, *b],
        Conv2d { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        GroupNorm { x, gamma, beta, .. } | LayerNorm { x, gamma, beta, .. } => {
            vec![*x, *gamma, *beta]
        }
        Softmax { x, .. } | Permute { x, .. } | Narrow { x, .. } | MaxPool2x { x, .. }
        | Dropout { x, .. } => vec![*x],
        Concat { xs, .. } => xs.clone(),
        Embedding { table, .. } => vec![*table],
        CrossEntropy { logits, .. } | LogProbSum { logits, .. } => vec![*logits],
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaves.remove(&v)
    }

    /// Gradient per parameter touched by the forward pass. Parameters the
    /// loss does not depend on get zeros so optimizer state stays aligned.
    pub fn for_params(mut self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..store.len()).map(|_| None).collect();
        let params = std::mem::take(&mut self.params);
        for (id, v) in params {
            let g = self.leaves.remove(&v).unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
            out[id.index()] = Some(g);
        }
        out
    }
}

pub(crate) fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
