//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every forward op pushes one
//! node holding its output value and whatever it saved for the backward rule,
//! so node order is already a topological order. [`Graph::backward`] walks the
//! nodes in reverse and accumulates gradients into the leaves that were created
//! with `requires_grad`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of an op defined outside this crate.
///
/// Returns one optional gradient per input, in input order; `None` means the
/// op is not differentiable w.r.t. that input.
pub trait CustomBackward<T>: Send {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    /// `2 * sigmoid(x)`, range (0, 2).
    TwoSigmoid,
    /// `x * sigmoid(x)`.
    Swish,
    Relu,
    Exp,
    Ln,
    Tanh,
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Unary(Var, UnaryKind),
    Glu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    BatchNorm { x: Var, inv_std: Vec<T> },
    DepthwiseConv1d { x: Var, w: Var },
    Conv2d { x: Var, w: Var, stride: (usize, usize), pad: (usize, usize) },
    Dropout { x: Var, mask: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis0(Var),
    Reparameterize { mu: Var, sigma: Var, eps: Vec<T> },
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward<T>> },
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Transpose(x) | Scale(x, _) | Unary(x, _) | Glu(x) | Softmax(x) | LogSoftmax(x)
            | LogSumExp(x) | Reshape(x) | Sum(x) | Mean(x) | SumAxis0(x) => vec![*x],
            LayerNorm { x, .. } | BatchNorm { x, .. } | Dropout { x, .. } | Slice { x, .. } => {
                vec![*x]
            }
            DepthwiseConv1d { x, w } | Conv2d { x, w, .. } => vec![*x, *w],
            Embedding { table, .. } => vec![*table],
            Concat { inputs, .. } | Custom { inputs, .. } => inputs.clone(),
            Reparameterize { mu, sigma, .. } => vec![*mu, *sigma],
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), training: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    /// Training-mode graph whose dropout masks come from a stream seeded by `seed`.
    pub fn training(seed: u64) -> Self {
        Self { training: true, rng: ChaCha8Rng::seed_from_u64(seed), ..Self::new() }
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    pub(crate) fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }

    pub(crate) fn push(&mut self, kind: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(kind));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers an op whose backward rule lives outside this crate.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        rule: Box<dyn CustomBackward<T>>,
    ) -> Result<Var> {
        let name = rule.name();
        self.push(name, output, Op::Custom { inputs: inputs.to_vec(), rule })
    }

    /// Back-propagates from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar { shape: lv.shape().to_vec() });
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        let mut adjoint: Vec<Option<Tensor<T>>> = Vec::new();
        adjoint.resize_with(loss.0 + 1, || None);
        adjoint[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adjoint[i].take() else { continue };
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            let inputs = node.op.inputs();
            let input_grads = ops::backward(self, i, &g);
            debug_assert_eq!(inputs.len(), input_grads.len());
            for (v, ig) in inputs.into_iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut adjoint[v.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }
}
