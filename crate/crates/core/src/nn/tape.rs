//! Reverse-mode autodiff over a linear tape.
//!
//! Every operation appends a node holding its value and a closure mapping the
//! output gradient to parent gradients. Nodes are topologically ordered by
//! construction, so the backward pass is a single reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::param::Param;
use super::tensor::{Real, Tensor};

/// Maps the output gradient to one optional gradient per parent. The `needs`
/// mask says which parents actually require a gradient.
pub(crate) type GradFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    grad_fn: Option<GradFn<T>>,
}

pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<usize, usize>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Node {
            value: Arc::new(value),
            requires_grad,
            parents: Vec::new(),
            grad_fn: None,
        })
    }

    /// Binds a parameter to this tape; repeated calls return the same node.
    pub fn param(&self, p: &Param<T>) -> Var<'_, T> {
        if let Some(&id) = self.bound.borrow().get(&p.uid()) {
            return Var { tape: self, id };
        }
        let v = self.leaf(p.value(), p.is_trainable());
        self.bound.borrow_mut().insert(p.uid(), v.id);
        v
    }

    pub(crate) fn op(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        grad_fn: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            value: Arc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            grad_fn: if requires_grad {
                Some(Box::new(grad_fn))
            } else {
                None
            },
        })
    }

    /// Gradients of a scalar `loss` with respect to every leaf requiring grad.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let seed_shape = nodes[loss.id].value.shape().to_vec();
        grads[loss.id] = Some(Tensor::full(&seed_shape, T::one()));
        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            let Some(f) = &node.grad_fn else { continue };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let pgrads = f(&g, &needs);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for ((&p, gp), need) in node.parents.iter().zip(pgrads).zip(&needs) {
                let (Some(gp), true) = (gp, *need) else { continue };
                debug_assert_eq!(gp.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gp),
                    slot @ None => *slot = Some(gp),
                }
            }
        }
        // Intermediate gradients were consumed above; only leaves remain.
        Gradients {
            grads,
            bound: self.bound.borrow().clone(),
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

/// A handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant((*self.value()).clone())
    }
}

pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    bound: HashMap<usize, usize>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf variable, if it required one and was reached.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.bound
            .get(&p.uid())
            .and_then(|&id| self.grads[id].as_ref())
    }
}
