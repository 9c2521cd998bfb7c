//! Plain mini-batch SGD on softmax cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LossFn, Network, SoftmaxCrossEntropy};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.1,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub initial_train_accuracy: f64,
    pub final_train_accuracy: f64,
    /// Present when a held-out set was supplied.
    pub final_test_accuracy: Option<f64>,
    /// Mean training loss of every epoch, in order.
    pub loss_trajectory: Vec<f64>,
}

fn labels_of<T: Scalar>(data: &LabeledDataset<T>, k: usize) -> Result<Vec<usize>> {
    data.labels()
        .iter()
        .map(|l| match *l {
            Some(l) if l < k => Ok(l),
            Some(l) => Err(Error::IndexOutOfRange {
                what: "label",
                index: l,
                limit: k,
            }),
            None => Err(Error::InvalidConfig(
                "training requires labeled samples".into(),
            )),
        })
        .collect()
}

/// Fraction of samples whose predicted label equals the stored one.
pub fn accuracy<T: Scalar>(net: &Network<T>, data: &LabeledDataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels = labels_of(data, net.output_dim())?;
    let mut correct = 0usize;
    for (x, &y) in data.inputs().iter().zip(&labels) {
        if net.predict(x)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains `net` in place. Deterministic for a given seed.
pub fn train_sgd<T: Scalar>(
    net: &mut Network<T>,
    train: &LabeledDataset<T>,
    test: Option<&LabeledDataset<T>>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be > 0, got {}",
            cfg.lr
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be > 0".into()));
    }
    let labels = labels_of(train, net.output_dim())?;
    let initial_train_accuracy = accuracy(net, train)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![T::zero(); net.param_count()];
    let mut loss_trajectory = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = T::zero());
            for &i in batch {
                let trace = net.forward(&train.inputs()[i])?;
                let (loss, seed) = SoftmaxCrossEntropy.value_and_grad(trace.logits(), labels[i])?;
                epoch_loss += loss.to_f64_lossy();
                net.backward_with(&trace, &seed, Some(&mut grad), false, |_, _, _| {});
            }
            let step = T::lit(cfg.lr) / T::lit(batch.len() as f64);
            for (p, &g) in net.params_mut().iter_mut().zip(&grad) {
                *p -= step * g;
            }
        }
        if net.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain(
                "training diverged (non-finite parameters)".into(),
            ));
        }
        loss_trajectory.push(epoch_loss / train.len() as f64);
    }

    let final_train_accuracy = if cfg.epochs == 0 {
        initial_train_accuracy
    } else {
        accuracy(net, train)?
    };
    let final_test_accuracy = test.map(|t| accuracy(net, t)).transpose()?;
    Ok(TrainReport {
        epochs: cfg.epochs,
        initial_train_accuracy,
        final_train_accuracy,
        final_test_accuracy,
        loss_trajectory,
    })
}
