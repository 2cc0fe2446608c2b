//! Reverse-mode backward pass.

use std::collections::{HashMap, HashSet};

use super::{Scalar, TensorBase};
use crate::error::{Error, Result};

/// Accumulator the backward closures write parent gradients into.
pub(crate) struct GradSink<E: Scalar> {
    grads: HashMap<u64, Vec<E>>,
}

impl<E: Scalar> GradSink<E> {
    fn new() -> Self {
        GradSink {
            grads: HashMap::new(),
        }
    }

    /// Elementwise-add `contribution` into the gradient buffer of `t`.
    pub(crate) fn add_to(&mut self, t: &TensorBase<E>, contribution: &[E]) {
        debug_assert_eq!(contribution.len(), t.numel());
        let buf = self
            .grads
            .entry(t.id())
            .or_insert_with(|| vec![E::zero(); t.numel()]);
        for (b, &c) in buf.iter_mut().zip(contribution) {
            *b += c;
        }
    }
}

/// Gradient map returned by [`backward`]: leaf tensor id → gradient.
pub struct Gradients<E: Scalar> {
    grads: HashMap<u64, Vec<E>>,
}

impl<E: Scalar> Gradients<E> {
    /// Gradient of the loss with respect to `t`, if `t` received one.
    pub fn get(&self, t: &TensorBase<E>) -> Option<TensorBase<E>> {
        self.grads
            .get(&t.id())
            .map(|g| TensorBase::from_vec(g.clone(), t.shape()).expect("gradient shape matches"))
    }

    /// Raw gradient slice lookup by tensor id.
    pub fn get_raw(&self, t: &TensorBase<E>) -> Option<&[E]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<E: Scalar> TensorBase<E> {
    /// Reverse-mode differentiation of a scalar loss.
    ///
    /// Returns gradients for every `requires_grad` leaf reachable from the
    /// loss. The pass is a pure function of the recorded graph: calling it
    /// twice on the same graph returns the same map. Re-differentiation
    /// after a parameter update requires a fresh forward pass.
    pub fn backward(&self) -> Result<Gradients<E>> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }

        // Iterative DFS postorder: parents first, loss last.
        let mut order: Vec<TensorBase<E>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(TensorBase<E>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx == 0 {
                if visited.contains(&node.id()) {
                    continue;
                }
                visited.insert(node.id());
            }
            let parents = node.parents();
            if child_idx < parents.len() {
                let next = parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if !visited.contains(&next.id()) && next.requires_grad() {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }

        let mut sink = GradSink::new();
        sink.grads.insert(self.id(), vec![E::one()]);

        for node in order.iter().rev() {
            let Some(grad) = sink.grads.remove(&node.id()) else {
                continue;
            };
            match node.backward_fn() {
                Some(back) => back(&grad, &mut sink),
                None => {
                    // Leaf: keep its gradient if it is trainable.
                    if node.requires_grad() {
                        sink.grads.insert(node.id(), grad);
                    }
                }
            }
        }

        Ok(Gradients { grads: sink.grads })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{RngState, Tensor};

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::param("x", vec![1.0, -2.0, 3.0, 0.5], &[2, 2]).unwrap();
        let loss = x.sum_all();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().to_vec(), vec![1.0; 4]);
    }

    #[test]
    fn grad_of_square() {
        let x = Tensor::param("x", vec![3.0], &[1]).unwrap();
        let loss = x.mul(&x).unwrap();
        let grads = loss.backward().unwrap();
        assert!((grads.get(&x).unwrap().to_vec()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::param("x", vec![1.0, 2.0], &[2]).unwrap();
        assert!(x.backward().is_err());
    }

    #[test]
    fn repeated_backward_is_idempotent() {
        let x = Tensor::param("x", vec![2.0], &[1]).unwrap();
        let loss = x.mul(&x).unwrap().scale(3.0).sum_all();
        let g1 = loss.backward().unwrap().get(&x).unwrap().to_vec();
        let g2 = loss.backward().unwrap().get(&x).unwrap().to_vec();
        assert_eq!(g1, g2);
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let x = Tensor::param("x", vec![1.0], &[1]).unwrap();
        let w = Tensor::param("w", vec![2.0], &[1]).unwrap();
        w.set_requires_grad(false);
        let loss = x.mul(&w).unwrap().sum_all();
        let grads = loss.backward().unwrap();
        assert!(grads.get(&x).is_some());
        assert!(grads.get(&w).is_none());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = x*y + x*z -> dx = y + z
        let x = Tensor::param("x", vec![2.0], &[1]).unwrap();
        let y = Tensor::from_vec(vec![3.0], &[1]).unwrap();
        let z = Tensor::from_vec(vec![5.0], &[1]).unwrap();
        let loss = x.mul(&y).unwrap().add(&x.mul(&z).unwrap()).unwrap().sum_all();
        let grads = loss.backward().unwrap();
        assert!((grads.get(&x).unwrap().to_vec()[0] - 8.0).abs() < 1e-6);
    }

    #[test]
    fn deep_chain_does_not_overflow_stack() {
        let mut rng = RngState::new(1, 0);
        let x = Tensor::param("x", rng.normal_vec::<f32>(4), &[4]).unwrap();
        let mut t = x.clone();
        for _ in 0..20_000 {
            t = t.affine(1.0002, 0.0);
        }
        let loss = t.mean_all();
        let grads = loss.backward().unwrap();
        assert!(grads.get(&x).is_some());
    }
}
