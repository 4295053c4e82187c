use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A named trainable tensor with its momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    momentum: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let momentum = vec![T::zero(); value.len()];
        Self {
            name: name.into(),
            value,
            momentum,
        }
    }

    pub fn momentum_buffer(&self) -> &[T] {
        &self.momentum
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param::new(self.name.clone(), self.value.cast())
    }
}

/// Momentum SGD with L2 weight decay:
/// `buf = momentum * buf + grad + weight_decay * value; value -= lr * buf`.
/// Gradients are cleared afterwards. Fails without touching anything if any
/// parameter lacks a gradient.
pub fn sgd_step<T: Scalar>(
    params: &mut [Param<T>],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.value.grad().is_none()) {
        return Err(Error::State(format!(
            "parameter `{}` has no gradient",
            p.name
        )));
    }
    for p in params.iter_mut() {
        let grad = p.value.take_grad().expect("checked above");
        for ((v, b), g) in p.value.data_mut().iter_mut().zip(&mut p.momentum).zip(grad) {
            *b = momentum * *b + g + weight_decay * *v;
            *v -= lr * *b;
        }
    }
    Ok(())
}
