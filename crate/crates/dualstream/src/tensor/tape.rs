//! The operation record and reverse pass.
//!
//! A tape is a Wengert list: every forward op pushes a node holding its
//! output value, its parent indices and a closure computing parent gradients
//! from the upstream gradient. `backward` walks the list from the loss node
//! to index zero and accumulates gradients into any bound parameters.

use std::cell::RefCell;

use super::param::Parameter;
use super::{Scalar, Tensor, TensorError};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

pub(crate) struct Node<T: Scalar> {
    pub value: Tensor<T>,
    pub parents: Vec<usize>,
    pub backward: Option<BackwardFn<T>>,
    pub param: Option<Parameter<T>>,
}

/// Append-only operation record for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub(crate) fn push(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        param: Option<Parameter<T>>,
    ) -> Var<'_, T> {
        debug_assert!(
            value.is_finite(),
            "non-finite value produced by a forward op"
        );
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf with no gradient interest (inputs, fixed tensors).
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, vec![], None, None)
    }

    /// A leaf whose gradient is retained (finite-difference probes).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, vec![], None, None)
    }

    /// A leaf bound to a parameter: its current value is snapshotted and the
    /// reverse pass accumulates into the parameter's gradient buffer.
    pub fn param(&self, p: &Parameter<T>) -> Var<'_, T> {
        self.push(p.value(), vec![], None, Some(p.clone()))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Gradients of every node are recomputed from scratch on each call, so
    /// calling twice accumulates twice into parameter buffers.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<(), TensorError> {
        assert!(std::ptr::eq(loss.tape, self), "loss from another tape");
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(TensorError::NotScalar(loss_node.value.shape().to_vec()));
        }
        if loss_node.backward.is_none() && loss_node.param.is_none() {
            return Err(TensorError::NoGraph);
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(loss_node.value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let Some(upstream) = grads[id].clone() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let parent_grads = backward(&upstream);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (pid, pg) in node.parents.iter().zip(parent_grads) {
                    debug_assert!(pg.is_finite(), "non-finite gradient at node {id}");
                    match &mut grads[*pid] {
                        Some(acc) => acc.accumulate(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            if let Some(p) = &node.param {
                p.accumulate_grad(&upstream);
            }
        }

        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of a var from the most recent `backward` call.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.borrow().get(v.id).cloned().flatten()
    }
}

/// A handle to one tape node. Copyable; all ops borrow the tape.
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Scalar> Copy for Var<'_, T> {}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_through_sum_of_products() {
        // loss = sum(w * x), grad(w) = x
        let tape = Tape::<f64>::new();
        let w = Parameter::new("w", Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let wv = tape.param(&w);
        let x = tape.constant(Tensor::from_vec(vec![4.0, 5.0, 6.0]));
        let prod = wv.mul(x).unwrap();
        let loss = prod.sum_all();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_twice_doubles_param_grads() {
        let tape = Tape::<f64>::new();
        let w = Parameter::new("w", Tensor::from_vec(vec![2.0]));
        let wv = tape.param(&w);
        let loss = wv.mul(wv).unwrap().sum_all();
        tape.backward(loss).unwrap();
        let g1 = w.grad().data()[0];
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().data()[0], 2.0 * g1);
    }

    #[test]
    fn nograph_on_bare_constant() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(c), Err(TensorError::NoGraph)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = a.relu();
        assert!(matches!(tape.backward(b), Err(TensorError::NotScalar(_))));
    }
}
