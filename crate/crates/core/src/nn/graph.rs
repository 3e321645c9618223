use std::borrow::Cow;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule of a recorded operation: given the op's inputs, its output
/// and the gradient flowing into the output, return one gradient per input
/// (`None` where the input does not need one).
pub(crate) trait Backward {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward>>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Tape of operations for reverse-mode differentiation. Values are computed
/// eagerly when ops are recorded; [`Graph::backward`] walks the tape in
/// reverse and accumulates gradients.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Record a leaf. It receives a gradient iff `t.requires_grad`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            value: Cow::Owned(t),
            inputs: Vec::new(),
            op: None,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a trainable parameter, borrowed from the store.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(store.value(id)),
            inputs: Vec::new(),
            op: None,
            needs_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant borrowed from elsewhere (e.g. a frozen buffer).
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            inputs: Vec::new(),
            op: None,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, inputs: &[Var], op: impl Backward + 'static) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            inputs: inputs.iter().map(|v| v.0).collect(),
            op: needs_grad.then(|| Box::new(op) as Box<dyn Backward>),
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of `v`'s value with its gradient attached.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.value(v).clone();
        t.requires_grad = self.nodes[v.0].needs_grad;
        t.grad = self.grad(v).map(<[f64]>::to_vec);
        t
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| self.nodes[i].value.as_ref()).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].needs_grad).collect();
                let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
                for (&i, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !self.nodes[i].needs_grad {
                        continue;
                    }
                    match &mut grads[i] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(g),
                    }
                }
            }
            grads[idx] = Some(grad);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradients for every parameter recorded with [`Graph::param`]. A
    /// parameter recorded twice has its gradients summed.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(id), Some(Some(g))) = (node.param, self.grads.get(i)) else { continue };
            match out.iter_mut().find(|(p, _)| *p == id) {
                Some((_, acc)) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => out.push((id, g.clone())),
            }
        }
        out
    }
}
