use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A classification loss over a logit vector.
pub trait LossFn<T: Scalar>: Sync {
    /// Returns the loss and its gradient with respect to the logits.
    fn value_and_grad(&self, logits: &[T], target: usize) -> Result<(T, Vec<T>)>;
}

/// Softmax followed by negative log-likelihood of the target class.
#[derive(Debug, Clone, Copy, Default)]
pub struct SoftmaxCrossEntropy;

impl SoftmaxCrossEntropy {
    pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
        let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }
}

impl<T: Scalar> LossFn<T> for SoftmaxCrossEntropy {
    fn value_and_grad(&self, logits: &[T], target: usize) -> Result<(T, Vec<T>)> {
        if target >= logits.len() {
            return Err(Error::IndexOutOfRange {
                what: "target class",
                index: target,
                limit: logits.len(),
            });
        }
        let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        let loss = sum.ln() + max - logits[target];
        let mut grad: Vec<T> = exps.into_iter().map(|e| e / sum).collect();
        grad[target] -= T::one();
        Ok((loss, grad))
    }
}
