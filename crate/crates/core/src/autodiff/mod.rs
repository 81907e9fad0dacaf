//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every forward operation as a node holding its output
//! value, its parents and a vector-Jacobian rule. [`Graph::backward`] walks
//! the nodes in exact reverse recording order. Nodes whose parents do not
//! require gradients never store a rule, so inference graphs carry no
//! backward state.

mod gradcheck;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

pub use gradcheck::{grad_check, grad_check_model, GradCheckReport};
pub use ops::{bilinear_resize, softmax_last, IGNORE_LABEL};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Coarse operator family of a node, used for graph audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Linear,
    Norm,
    Activation,
    Attention,
    Resize,
    Reshape,
    Concat,
    Add,
    Reduce,
    Loss,
}

/// Whether normalization layers use batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) struct BackwardArgs<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    kind: OpKind,
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
    flops: u64,
    tag: Option<String>,
}

/// Read-only summary of a recorded node.
#[derive(Clone, Debug)]
pub struct NodeInfo {
    pub id: usize,
    pub op: &'static str,
    pub kind: OpKind,
    pub shape: Vec<usize>,
    pub parents: Vec<usize>,
    pub flops: u64,
    pub tag: Option<String>,
}

/// The recording tape.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: Vec<Arc<Tensor<T>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
    mode: Mode,
    seed: u64,
    fault: Cell<Option<usize>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    g: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph with no parameter bindings.
    pub fn new(mode: Mode) -> Self {
        Self::build(Vec::new(), mode, 0)
    }

    /// A graph whose [`Graph::param`] leaves read from `store`.
    pub fn with_params(store: &ParamStore<T>, mode: Mode) -> Self {
        Self::build(store.values(), mode, 0)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn build(params: Vec<Arc<Tensor<T>>>, mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params,
            param_nodes: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
            mode,
            seed,
            fault: Cell::new(None),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Constant input; never receives a gradient.
    pub fn input(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Arc::new(t), false, "input")
    }

    /// Differentiable leaf.
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Arc::new(t), true, "leaf")
    }

    /// Leaf bound to a stored parameter. Repeated requests share one node.
    pub fn param(&self, id: ParamId) -> Var<'_, T> {
        if let Some(&n) = self.param_nodes.borrow().get(&id) {
            return Var { g: self, id: n };
        }
        let value = self.params.get(id.index()).cloned().expect("parameter bound to this graph");
        let v = self.push_leaf(value, true, "param");
        self.param_nodes.borrow_mut().insert(id, v.id);
        v
    }

    fn push_leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool, op: &'static str) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            kind: OpKind::Leaf,
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
            flops: 0,
            tag: None,
        });
        Var { g: self, id: nodes.len() - 1 }
    }

    pub(crate) fn push(
        &self,
        op: &'static str,
        kind: OpKind,
        value: Tensor<T>,
        parents: &[usize],
        flops: u64,
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        if self.fault.get().is_none() && !value.all_finite() {
            self.fault.set(Some(nodes.len()));
        }
        nodes.push(Node {
            op,
            kind,
            value: Arc::new(value),
            parents: parents.to_vec(),
            requires_grad,
            backward: requires_grad.then_some(backward),
            flops,
            tag: None,
        });
        Var { g: self, id: nodes.len() - 1 }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn record_buffer_update(&self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    /// Running-statistic updates produced by train-mode normalization.
    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    /// Fails if any recorded node produced a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.fault.get() {
            None => Ok(()),
            Some(id) => {
                let nodes = self.nodes.borrow();
                Err(Error::Numeric(format!("non-finite output from `{}` (node {id})", nodes[id].op)))
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, id: usize) -> NodeInfo {
        let nodes = self.nodes.borrow();
        let n = &nodes[id];
        NodeInfo {
            id,
            op: n.op,
            kind: n.kind,
            shape: n.value.shape().to_vec(),
            parents: n.parents.clone(),
            flops: n.flops,
            tag: n.tag.clone(),
        }
    }

    pub fn nodes(&self) -> Vec<NodeInfo> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    /// Nodes carrying `tag`, in recording order.
    pub fn tagged(&self, tag: &str) -> Vec<Var<'_, T>> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.tag.as_deref() == Some(tag))
            .map(|(id, _)| Var { g: self, id })
            .collect()
    }

    /// Sum of forward FLOPs over all recorded nodes.
    pub fn total_flops(&self) -> u64 {
        self.nodes.borrow().iter().map(|n| n.flops).sum()
    }

    pub fn var(&self, id: usize) -> Var<'_, T> {
        assert!(id < self.len(), "node {id} not on this graph");
        Var { g: self, id }
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut keep = vec![false; nodes.len()];
        for (&_, &n) in self.param_nodes.borrow().iter() {
            keep[n] = true;
        }
        for (i, n) in nodes.iter().enumerate() {
            if (n.kind == OpKind::Leaf && n.requires_grad) || n.tag.is_some() {
                keep[i] = true;
            }
        }
        grads[output.id] = Some(Tensor::full(out.value.shape().to_vec(), T::one()));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else { continue };
            let Some(grad) = (if keep[id] { grads[id].clone() } else { grads[id].take() }) else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let args = BackwardArgs { grad: &grad, inputs, output: &node.value, needs };
            let parent_grads = rule(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "rule for `{}`", node.op);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape for parent of `{}`", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let param_nodes = self.param_nodes.borrow().clone();
        Ok(Gradients { grads, param_nodes })
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.g
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.g.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.requires_grad(self.id)
    }

    /// Attaches a label to this node for later inspection.
    pub fn tag(self, tag: impl Into<String>) -> Self {
        self.g.nodes.borrow_mut()[self.id].tag = Some(tag.into());
        self
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_nodes: HashMap<ParamId, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a retained node: leaves, parameters, tagged nodes and the output.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_nodes.get(&id).and_then(|&n| self.grads[n].as_ref())
    }

    /// Parameter gradients in parameter-id order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<_> =
            self.param_nodes.iter().filter_map(|(&id, &n)| self.grads[n].as_ref().map(|g| (id, g))).collect();
        out.sort_by_key(|(id, _)| id.index());
        out
    }
}
