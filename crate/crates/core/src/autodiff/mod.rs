//! Dynamic reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s during the
//! forward pass. Node ids are assigned in creation order, so the tape is
//! already topologically sorted and [`Tape::backward`] is a single reverse
//! sweep. Gradients reaching a node are summed in tape order, which makes
//! the result bit-reproducible.

mod ops;

use std::cell::RefCell;
use std::fmt;

use crate::element::Element;
use crate::error::{contract_err, Error, Result};
use crate::tensor::{Dims, Tensor};

pub use ops::concat_channels;
pub use ops::concat_rows;

/// Vector-Jacobian product of one node: upstream gradient and a per-parent
/// "needs gradient" mask in, one optional gradient per parent out.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    leaf: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape that never records backward closures; every node is a
    /// constant. Used for inference.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad: requires_grad && self.record,
            leaf: true,
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub(crate) fn push(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: BackwardFn<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.record && parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value,
            requires_grad,
            leaf: false,
            parents: if requires_grad { parents.iter().map(|p| p.id).collect() } else { Vec::new() },
            backward: if requires_grad { Some(backward) } else { None },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of the scalar `root` with respect to every
    /// gradient-requiring leaf. Backward closures reachable from `root` are
    /// released afterwards.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::Internal("backward root belongs to another tape".into()));
        }
        let root_dims = self.nodes.borrow()[root.id].value.dims();
        if root_dims != [1, 1, 1, 1] {
            return Err(contract_err!("backward root must be scalar, got {root_dims:?}"));
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(Tensor::scalar(T::ONE));
        }
        for id in (0..=root.id).rev() {
            let Some(backward) = nodes[id].backward.take() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parents = std::mem::take(&mut nodes[id].parents);
            let needs: Vec<bool> = parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let pgrads = backward(&g, &needs)?;
            if pgrads.len() != parents.len() {
                return Err(Error::Internal(format!(
                    "node {id} returned {} gradients for {} parents",
                    pgrads.len(),
                    parents.len()
                )));
            }
            for ((&p, pg), need) in parents.iter().zip(pgrads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                let pdims = nodes[p].value.dims();
                if pg.dims() != pdims {
                    return Err(Error::Internal(format!(
                        "node {id}: gradient {:?} for parent {p} of shape {pdims:?}",
                        pg.dims()
                    )));
                }
                grads[p] = Some(match grads[p].take() {
                    None => pg,
                    Some(acc) => add_same(&acc, &pg)?,
                });
            }
        }
        let mut out = Vec::with_capacity(nodes.len());
        for (id, node) in nodes.iter().enumerate() {
            if node.leaf && node.requires_grad {
                out.push(Some(match grads[id].take() {
                    Some(g) => g,
                    None => Tensor::zeros(node.value.dims())?,
                }));
            } else {
                out.push(None);
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn add_same<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.dims(), data)
}

/// Result of [`Tape::backward`]: one gradient per differentiable leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// `None` for vars that do not require gradients or are not leaves.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn by_id(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn dims(&self) -> Dims {
        self.tape.nodes.borrow()[self.id].value.dims()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.dims())
    }
}
