//! Learnable parameters: a value tensor plus a same-shaped gradient that
//! backward passes accumulate into (sum mode) until `zero_grad`.

use crate::tensor::{Scalar, Tensor};

pub struct Param<E> {
    name: String,
    value: Tensor<E>,
    grad: Tensor<E>,
    /// Logical shape written to checkpoints, e.g. [cout, cin, k, k] or [c].
    ckpt_dims: Vec<usize>,
}

impl<E: Scalar> Param<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>, ckpt_dims: Vec<usize>) -> Self {
        let (n, c, h, w) = value.dims();
        let numel: usize = ckpt_dims.iter().product();
        assert_eq!(numel, n * c * h * w, "checkpoint dims disagree with tensor");
        let grad = Tensor::zeros(n, c, h, w);
        Param {
            name: name.into(),
            value,
            grad,
            ckpt_dims,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn ckpt_dims(&self) -> &[usize] {
        &self.ckpt_dims
    }

    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<E> {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor<E> {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor<E> {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(E::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Uniform callback used to enumerate every parameter of a model in a stable
/// order (optimizer steps, checkpointing, gradient probes).
pub trait VisitParams<E: Scalar> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<E>));

    fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }
}
