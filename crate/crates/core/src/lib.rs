//! Functional test generation for neural-network IP integrity checks.
//!
//! A vendor publishes a small set of test inputs together with the outputs
//! of the genuine model. Users run the model as a black box on those inputs;
//! any mismatch means the parameters were altered. The tests are chosen to
//! maximize *validation coverage*: the fraction of parameters whose gradient
//! with respect to the outputs is non-zero for at least one test, so that a
//! perturbation of those parameters propagates to what the user observes.
//!
//! Modules:
//! - [`nn`]: dense networks with a flat parameter store, exact reverse-mode
//!   gradients and SGD training.
//! - [`coverage`]: activation masks and validation coverage.
//! - [`testgen`]: greedy corpus selection, gradient-based synthesis and the
//!   combined strategy.
//! - [`faults`]: parameter perturbation attacks (single bias, gradient
//!   descent, Gaussian noise).
//! - [`validation`]: manifests, black-box validation and detection-rate
//!   experiments.
//! - [`data`]: IDX datasets, noise sets and PCNM model files.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coverage;
pub mod data;
pub mod error;
pub mod faults;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod testgen;
pub mod validation;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Network32 = nn::Network<f32>;
pub type Network64 = nn::Network<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Dataset32 = data::LabeledDataset<f32>;
pub type Dataset64 = data::LabeledDataset<f64>;
