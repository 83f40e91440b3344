use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Backward rule of a recorded op: receives the output gradient and a mask of
/// which parents need a gradient, returns one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Wengert list of primitive applications.
///
/// Nodes are appended in evaluation order, so ids are a topological order and
/// [`Tape::backward`] is a single reverse sweep. A tape is single-threaded;
/// independent tapes can live on independent threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    madds: Cell<u64>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("madds", &self.madds.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a value that gradients are taken with respect to.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Vec::new(), None, true)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Vec::new(), None, false)
    }

    /// Multiply-add operations executed by ops recorded on this tape.
    pub fn madds(&self) -> u64 {
        self.madds.get()
    }

    pub(crate) fn count_madds(&self, n: u64) {
        self.madds.set(self.madds.get() + n);
    }

    pub(crate) fn record<'t>(
        &'t self,
        value: impl Into<Rc<Tensor>>,
        parents: &[Var<'t>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let ids = parents.iter().map(|p| p.id).collect();
        let backward: Option<BackwardFn> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(value.into(), ids, backward, requires_grad)
    }

    fn push(
        &self,
        value: Rc<Tensor>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.len() != 1 {
            return Err(Error::shape("backward", &[root_value.shape()]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(Tensor::ones(root_value.shape().to_vec()));
        let mut leaves: Vec<Option<Tensor>> = (0..=root.id).map(|_| None).collect();

        for id in (0..=root.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                if node.requires_grad {
                    leaves[id] = Some(grad);
                }
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), needed) in node.parents.iter().zip(parent_grads).zip(&mask) {
                let (Some(g), true) = (g, *needed) else {
                    continue;
                };
                debug_assert_eq!(g.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Copies the current value off the tape.
    pub fn to_tensor(&self) -> Tensor {
        (*self.value()).clone()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push(self.value(), Vec::new(), None, false)
    }
}

/// Gradients of leaves reachable from the root of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when no path reaches it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        self.grads
            .get_mut(var.id)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
