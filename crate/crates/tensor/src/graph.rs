//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Each node
//! keeps its forward value and, when any input needs a gradient, a closure
//! that maps the output gradient to input gradients. [`Graph::backward`]
//! replays the tape in reverse.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Maps (output gradient, input values, output value) to one optional
/// gradient per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.graph.shape_of(self.id))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Arc::new(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// A free leaf whose gradient is recorded (used for probes and inputs
    /// that are optimised directly).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Arc::new(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad: true,
            param: None,
        })
    }

    /// Binds a stored parameter. Frozen parameters enter as constants.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var<'_>> {
        let id = store.id(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let p = store.get(id);
        Ok(self.push_node(Node {
            value: Arc::clone(&p.value),
            inputs: Vec::new(),
            backward: None,
            requires_grad: !p.frozen,
            param: (!p.frozen).then_some(id),
        }))
    }

    /// Records a node computed outside the built-in op set.
    pub fn custom<'g>(
        &'g self,
        inputs: &[Var<'g>],
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'g> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        self.push_node(Node {
            value: Arc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
            param: None,
        })
    }

    pub fn value(&self, v: Var<'_>) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[v.id].value)
    }

    pub fn requires_grad(&self, v: Var<'_>) -> bool {
        self.nodes.borrow()[v.id].requires_grad
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::Shape(format!(
                "backward needs a scalar, got {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let (Some(bw), Some(g)) = (&node.backward, &grads[id]) else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let input_grads = bw(g, &inputs, &node.value);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !nodes[inp].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), nodes[inp].value.shape(), "grad shape for node {inp}");
                match &mut grads[inp] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let params = nodes[..=loss.id]
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Accumulated gradient per parameter. A parameter bound more than once
    /// in the graph gets the sum over its bindings.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for &(pid, node) in &self.params {
            let Some(g) = self.grads[node].as_ref() else { continue };
            match out.iter_mut().find(|(p, _)| *p == pid) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((pid, g.clone())),
            }
        }
        out
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.shape_of(self.id)
    }

    pub(crate) fn unary(
        self,
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'g> {
        self.graph.custom(&[self], value, backward)
    }
}
