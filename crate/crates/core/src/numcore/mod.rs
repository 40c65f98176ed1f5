//! Dense tensors, a reverse-mode tape, and a finite-difference checker.

mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, DEFAULT_MAX_COORDS};
pub use scalar::{DType, Scalar};
pub use tape::{Conv2dGeometry, Gradients, Tape, Var};
pub use tensor::{argmax, row_entropy, Tensor};

/// Normalization guard for zero rows.
pub const NORM_EPS: f64 = 1e-12;

/// A tensor with an attached gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Variable<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub requires_grad: bool,
}

impl<T: Scalar> Variable<T> {
    pub fn new(value: Tensor<T>, requires_grad: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Variable {
            value,
            grad,
            requires_grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}
