//! Operation tape for reverse-mode differentiation.
//!
//! Every differentiable operation in the crate records one node holding its
//! input handles and a hand-written backward rule. [`Tape::backward`] replays
//! the nodes in reverse, accumulating gradients additively into each input.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arguments handed to a backward rule.
pub struct BackwardCtx<'a, T: Real = f32> {
    /// Gradient of the loss with respect to the node output.
    pub grad: &'a Tensor<T>,
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    /// Whether each input needs a gradient; rules may skip the others.
    pub needs: &'a [bool],
}

/// Returns one optional gradient per input, in input order.
pub type BackwardFn<T = f32> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    inputs: Vec<Var>,
    output: Var,
    backward: BackwardFn<T>,
}

/// Generic over the scalar type so that gradient checks can replay a model
/// in 64-bit; training uses `Tape<f32>`.
pub struct Tape<T: Real = f32> {
    values: Vec<Tensor<T>>,
    requires: Vec<bool>,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
    precise: HashMap<usize, f64>,
    replayed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape {
            values: Vec::new(),
            requires: Vec::new(),
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            precise: HashMap::new(),
            replayed: false,
        }
    }
}

impl Tape<f32> {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Real> Tape<T> {
    fn push_value(&mut self, t: Tensor<T>, requires: bool) -> Var {
        self.values.push(t);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_value(t, false)
    }

    /// A free input that receives a gradient (used by gradient checks).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push_value(t, true)
    }

    /// Records a parameter from `store`; repeated requests return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_value(store.value(id).cast(), true);
        self.params.insert(id, v);
        v
    }

    /// Makes later [`Tape::param`] requests for `id` return `v` instead of the
    /// stored value, so that a parameter can be driven as a free input.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.params.insert(id, v);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an operation. The output requires a gradient iff any input does;
    /// if none does the backward rule is dropped.
    pub fn push_op(&mut self, inputs: &[Var], output: Tensor<T>, backward: BackwardFn<T>) -> Var {
        let requires = inputs.iter().any(|v| self.requires[v.0]);
        let out = self.push_value(output, requires);
        if requires {
            self.nodes.push(Node {
                inputs: inputs.to_vec(),
                output: out,
                backward,
            });
        }
        out
    }

    /// Records a scalar-valued operation whose value was accumulated in 64-bit;
    /// [`Tape::scalar`] returns the unrounded value.
    pub fn push_scalar_op(&mut self, inputs: &[Var], value: f64, backward: BackwardFn<T>) -> Var {
        let v = self.push_op(inputs, Tensor::scalar(T::of(value)), backward);
        self.precise.insert(v.0, value);
        v
    }

    /// Value of a `1×1` var, in 64-bit when the producing op kept it.
    pub fn scalar(&self, v: Var) -> f64 {
        match self.precise.get(&v.0) {
            Some(&x) => x,
            None => self.values[v.0].item().f64(),
        }
    }

    /// Replays the tape from a scalar `loss` seeded with 1.0.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.replayed {
            return Err(Error::TapeReplayed);
        }
        if self.values[loss.0].shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.replayed = true;
        self.grads = vec![None; self.values.len()];
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));

        for node in self.nodes.iter().rev() {
            let Some(grad) = self.grads[node.output.0].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.values[v.0]).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.requires[v.0]).collect();
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: &inputs,
                output: &self.values[node.output.0],
                needs: &needs,
            };
            let input_grads = (node.backward)(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((v, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.values[v.0].shape());
                match &mut self.grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            self.grads[node.output.0] = Some(grad);
        }
        Ok(())
    }

    /// Clears gradients so that `backward` may run again on the same graph.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.replayed = false;
    }

    /// Gradient of the last backward pass; zeros for values it never reached.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.values[v.0].shape();
                Tensor::zeros(r, c)
            }
        }
    }

    /// Adds the gradient of every recorded parameter into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grads.get(v.0).and_then(Option::as_ref) {
                store.accumulate_grad(id, &g.cast());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::ops;

    #[test]
    fn sum_of_vector_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 3, vec![0.5, -2.0, 7.0]));
        let s = ops::sum(&mut tape, x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = ops::mul(&mut tape, x, x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).item(), 6.0);
    }

    #[test]
    fn second_backward_without_reset_fails() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = ops::sum(&mut tape, x);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeReplayed)));
        tape.reset();
        tape.backward(y).unwrap();
    }

    #[test]
    fn constants_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = ops::mul(&mut tape, x, c);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(c).item(), 0.0);
        assert_eq!(tape.grad(x).item(), 5.0);
    }

    #[test]
    fn gradients_accumulate_additively() {
        // d/dx [sum(x*x) + sum(3x)] == d/dx sum(x*x) + d/dx sum(3x)
        let x0 = Tensor::from_vec(1, 4, vec![0.3, -1.2, 2.0, 0.0]);
        let grad_of = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let sq = ops::mul(&mut tape, x, x);
            let f = ops::sum(&mut tape, sq);
            let lin = ops::scale(&mut tape, x, 3.0);
            let g = ops::sum(&mut tape, lin);
            let out = match which {
                0 => f,
                1 => g,
                _ => ops::add(&mut tape, f, g),
            };
            tape.backward(out).unwrap();
            tape.grad(x)
        };
        let mut sum = grad_of(0);
        sum.add_assign(&grad_of(1));
        assert_eq!(sum, grad_of(2));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }
}
