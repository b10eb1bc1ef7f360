//! The autodiff tape.
//!
//! Every op appends a node holding its output value and, when any input is
//! tracked, a boxed backward closure. Nodes only reference earlier nodes, so
//! the node vector is already in topological order and the reverse pass is a
//! single backwards sweep.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::add_into;
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient contributions produced by one op's backward step.
pub(crate) type Contributions<T> = Vec<(Var, Vec<T>)>;

pub(crate) trait BackwardOp<T: Real> {
    fn backward(&self, out: &Tensor<T>, grad: &[T], graph: &GraphView<'_, T>) -> Contributions<T>;
}

pub(crate) struct Node<T: Real> {
    pub(crate) value: Arc<Tensor<T>>,
    grad: Option<Vec<T>>,
    pub(crate) tracked: bool,
    op: Option<Box<dyn BackwardOp<T>>>,
}

/// Read-only access to node values during the reverse pass.
pub(crate) struct GraphView<'a, T: Real> {
    nodes: &'a [Node<T>],
}

impl<T: Real> GraphView<'_, T> {
    pub(crate) fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub(crate) fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }
}

/// Records differentiable computation for one forward pass.
pub struct Graph<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records backward closures. Used for inference.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. It is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.shared_leaf(Arc::new(t))
    }

    fn shared_leaf(&mut self, t: Arc<Tensor<T>>) -> Var {
        let tracked = self.grad_enabled && t.requires_grad();
        self.nodes.push(Node {
            value: t,
            grad: None,
            tracked,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Registers a named parameter without copying it, returning the existing
    /// node when the name was already registered on this graph so that every
    /// use shares one gradient buffer. Trainability follows
    /// `t.requires_grad()`.
    pub fn param(&mut self, name: &str, t: &Arc<Tensor<T>>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.shared_leaf(Arc::clone(t));
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Parameters registered on this graph, in registration order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.param_order.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copy of a node's value with its gradient attached.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        let mut t = (*node.value).clone();
        if let Some(g) = &node.grad {
            t.set_grad(g.clone()).expect("grad matches value");
        }
        t
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub(crate) fn check_var(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "var",
                index: v.0,
                bound: self.nodes.len(),
            });
        }
        Ok(())
    }

    /// Appends an op output. The backward closure is kept only when some input
    /// is tracked and recording is on.
    pub(crate) fn push_op(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        op: impl BackwardOp<T> + 'static,
    ) -> Var {
        let tracked = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            tracked,
            op: if tracked { Some(Box::new(op)) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Afterwards every tracked leaf carries a gradient (zero when the loss
    /// does not depend on it). Backward closures and their saved buffers are
    /// dropped during the sweep, so a graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_var(loss)?;
        let seed = &self.nodes[loss.0].value;
        if !seed.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            match self.nodes[i].op.take() {
                None => {
                    self.nodes[i].grad = Some(g);
                }
                Some(op) => {
                    let view = GraphView { nodes: &self.nodes };
                    let contributions = op.backward(&self.nodes[i].value, &g, &view);
                    drop(op);
                    for (v, cg) in contributions {
                        debug_assert!(v.0 < i, "backward edge must point to an earlier node");
                        if !self.nodes[v.0].tracked {
                            continue;
                        }
                        debug_assert_eq!(cg.len(), self.nodes[v.0].value.numel());
                        match &mut grads[v.0] {
                            Some(existing) => add_into(existing, &cg),
                            slot @ None => *slot = Some(cg),
                        }
                    }
                }
            }
        }

        for node in self.nodes.iter_mut() {
            node.op = None;
            if node.tracked && node.value.requires_grad() && node.grad.is_none() {
                node.grad = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }

    /// Gradient of every registered parameter, in registration order. Returns
    /// `None` for parameters that were not trainable.
    pub fn param_grads(&self) -> Vec<(&str, Option<&[T]>)> {
        self.param_order
            .iter()
            .map(|(n, v)| (n.as_str(), self.nodes[v.0].grad.as_deref()))
            .collect()
    }
}
