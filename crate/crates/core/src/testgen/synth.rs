//! Input synthesis by gradient descent on the loss with respect to the input.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LossFn, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub step_size: f64,
    pub max_updates: usize,
    /// Number of targets per batch; must equal the network's output width.
    pub k: usize,
    pub clamp_range: (f64, f64),
    /// Shape given to synthesized tensors. Flat `[input_dim]` when absent.
    #[serde(default)]
    pub input_shape: Option<Vec<usize>>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            max_updates: 200,
            k: 10,
            clamp_range: (0.0, 1.0),
            input_shape: None,
        }
    }
}

impl SynthesisConfig {
    /// Defaults with `k` taken from the network.
    pub fn for_network<T: Scalar>(net: &Network<T>) -> Self {
        Self {
            k: net.output_dim(),
            ..Self::default()
        }
    }

    pub fn validate<T: Scalar>(&self, net: &Network<T>) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "step size must be > 0, got {}",
                self.step_size
            )));
        }
        let (lo, hi) = self.clamp_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "clamp range must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        if self.k != net.output_dim() {
            return Err(Error::Dimension {
                expected: net.output_dim(),
                got: self.k,
            });
        }
        if let Some(shape) = &self.input_shape {
            let numel: usize = shape.iter().product();
            if numel != net.input_dim() {
                return Err(Error::Dimension {
                    expected: net.input_dim(),
                    got: numel,
                });
            }
        }
        Ok(())
    }

    fn shape(&self, input_dim: usize) -> Vec<usize> {
        self.input_shape.clone().unwrap_or_else(|| vec![input_dim])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticInput<T = f32> {
    pub input: Tensor<T>,
    pub target: usize,
    /// Whether the network predicts `target` for `input`.
    pub reached_target: bool,
    pub initial_loss: T,
    pub final_loss: T,
}

/// One input per class `0..k`, each obtained by `max_updates` steps of
/// `x <- clamp(x - step_size * grad_x loss(x, target))` from the zero tensor.
///
/// Inputs that do not end up classified as their target are still returned,
/// with `reached_target` unset and a logged warning.
pub fn synthesize_batch<T: Scalar, L: LossFn<T>>(
    net: &Network<T>,
    cfg: &SynthesisConfig,
    loss: &L,
) -> Result<Vec<SyntheticInput<T>>> {
    cfg.validate(net)?;
    let eta = T::lit(cfg.step_size);
    let lo = T::lit(cfg.clamp_range.0);
    let hi = T::lit(cfg.clamp_range.1);
    let shape = cfg.shape(net.input_dim());

    (0..cfg.k)
        .into_par_iter()
        .map(|target| {
            let mut x = vec![T::zero(); net.input_dim()];
            let (initial_loss, _) = loss.value_and_grad(&net.logits(&x)?, target)?;
            for _ in 0..cfg.max_updates {
                let (_, g) = net.loss_input_gradient(&x, target, loss)?;
                for (xi, gi) in x.iter_mut().zip(&g) {
                    *xi = (*xi - eta * *gi).max(lo).min(hi);
                }
            }
            let logits = net.logits(&x)?;
            let (final_loss, _) = loss.value_and_grad(&logits, target)?;
            let reached_target = crate::nn::argmax(&logits) == target;
            if !reached_target {
                log::warn!("synthetic input for class {target} not classified as its target");
            }
            Ok(SyntheticInput {
                input: Tensor::new(shape.clone(), x)?,
                target,
                reached_target,
                initial_loss,
                final_loss,
            })
        })
        .collect()
}
