//! Trainable parameters.
//!
//! A [`Parameter`] couples a value tensor with a same-shaped gradient
//! buffer. Gradient accumulation is the only mutation the training path
//! performs outside of an explicit optimizer step, and `zero_grad`
//! resets the buffer to exact zeros.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Parameter<S: Scalar> {
    value: Tensor<S>,
    grad: Tensor<S>,
    trainable: bool,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(value: Tensor<S>) -> Self {
        let mut p = Parameter::new(value);
        p.trainable = false;
        p
    }

    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<S> {
        &self.grad
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Replaces the value; the new tensor must keep the shape.
    pub fn set_value(&mut self, value: Tensor<S>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::Shape {
                op: "parameter::set_value",
                detail: format!("{:?} -> {:?}", self.value.shape(), value.shape()),
            });
        }
        self.value = value;
        Ok(())
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &Tensor<S>) -> Result<()> {
        if delta.shape() != self.grad.shape() {
            return Err(Error::Shape {
                op: "parameter::accumulate_grad",
                detail: format!("{:?} vs {:?}", self.grad.shape(), delta.shape()),
            });
        }
        for (g, d) in self.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += *d;
        }
        Ok(())
    }

    /// Multiplies the accumulated gradient by a constant (used to average
    /// over accumulation microbatches).
    pub fn scale_grad(&mut self, factor: S) {
        for g in self.grad.data_mut().iter_mut() {
            *g *= factor;
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut().iter_mut() {
            *g = S::zero();
        }
    }

    /// In-place value update used by the optimizer.
    pub(crate) fn update_value(&mut self, f: impl FnMut(usize, &mut S)) {
        let data = self.value.data_mut();
        let mut f = f;
        for (i, x) in data.iter_mut().enumerate() {
            f(i, x);
        }
    }
}
