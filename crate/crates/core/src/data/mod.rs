//! Datasets, IDX ingestion and model serialization.

mod idx;
mod model_io;

pub use idx::{
    load_idx, parse_idx_images, parse_idx_labels, write_idx, IMAGES_MAGIC, LABELS_MAGIC,
};
pub use model_io::{
    load_model, model_from_bytes, model_hash, model_to_bytes, save_model, PCNM_MAGIC,
};

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DATA_DIR_ENV: &str = "PARAMCOVER_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Mnist,
    Toy,
    Noise,
    File,
}

/// Inputs with optional class labels. Unlabeled samples (`None`) are
/// accepted by coverage operations and rejected by training.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T = f32> {
    inputs: Vec<Tensor<T>>,
    labels: Vec<Option<usize>>,
    input_shape: Vec<usize>,
    provenance: Provenance,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(
        inputs: Vec<Tensor<T>>,
        labels: Vec<Option<usize>>,
        provenance: Provenance,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: inputs.len(),
                labels: labels.len(),
            });
        }
        let input_shape = inputs
            .first()
            .map(|t| t.shape().to_vec())
            .unwrap_or_default();
        if let Some(bad) = inputs.iter().find(|t| t.shape() != input_shape.as_slice()) {
            return Err(Error::InvalidConfig(format!(
                "inconsistent input shapes {:?} vs {:?}",
                bad.shape(),
                input_shape
            )));
        }
        Ok(Self {
            inputs,
            labels,
            input_shape,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[Tensor<T>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn get(&self, i: usize) -> Option<(&Tensor<T>, Option<usize>)> {
        self.inputs.get(i).map(|x| (x, self.labels[i]))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut inputs = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (x, y) = self.get(i).ok_or(Error::IndexOutOfRange {
                what: "sample",
                index: i,
                limit: self.len(),
            })?;
            inputs.push(x.clone());
            labels.push(y);
        }
        Ok(Self {
            inputs,
            labels,
            input_shape: self.input_shape.clone(),
            provenance: self.provenance,
        })
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            input_shape: self.input_shape.clone(),
            provenance: self.provenance,
        }
    }

    /// `n` distinct samples drawn uniformly without replacement, in draw order.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Self> {
        if n > self.len() {
            return Err(Error::InvalidConfig(format!(
                "cannot sample {n} items from a dataset of {}",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.subset(&sample(&mut rng, self.len(), n).into_vec())
    }

    /// Replaces every label with the network's prediction.
    pub fn relabel_with(&mut self, net: &Network<T>) -> Result<()> {
        for (x, y) in self.inputs.iter().zip(self.labels.iter_mut()) {
            *y = Some(net.predict(x)?);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> LabeledDataset<U> {
        LabeledDataset {
            inputs: self.inputs.iter().map(Tensor::cast).collect(),
            labels: self.labels.clone(),
            input_shape: self.input_shape.clone(),
            provenance: self.provenance,
        }
    }
}

/// Unlabeled images with pixels drawn i.i.d. from N(0.5, sigma^2) and clamped
/// to [0, 1].
pub fn make_noise_set(
    n: usize,
    shape: &[usize],
    sigma: f64,
    seed: u64,
) -> Result<LabeledDataset<f32>> {
    if n == 0 {
        return Err(Error::InvalidConfig("noise set needs n >= 1".into()));
    }
    let normal = Normal::new(0.5f64, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel: usize = shape.iter().product();
    let inputs = (0..n)
        .map(|_| {
            let data = (0..numel)
                .map(|_| normal.sample(&mut rng).clamp(0.0, 1.0) as f32)
                .collect();
            Tensor::new(shape.to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(inputs, vec![None; n], Provenance::Noise)
}

/// Two Gaussian blobs in the unit square, centred at (0.25, 0.25) and
/// (0.75, 0.75), alternating labels 0 and 1.
pub fn make_toy_blobs(n: usize, spread: f64, seed: u64) -> Result<LabeledDataset<f32>> {
    let normal = Normal::new(0.0f64, spread).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let centre = 0.25 + 0.5 * class as f64;
        let x = (centre + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        let y = (centre + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        inputs.push(Tensor::from_vec(vec![x, y]));
        labels.push(Some(class));
    }
    LabeledDataset::new(inputs, labels, Provenance::Toy)
}

/// Data directory from `PARAMCOVER_DATA_DIR`, if set.
pub fn data_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads `train-*` or `t10k-*` IDX files from `dir` using the standard
/// MNIST file names.
pub fn load_mnist_split(dir: &Path, split: Split) -> Result<LabeledDataset<f32>> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let mut ds = load_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    ds.provenance = Provenance::Mnist;
    Ok(ds)
}
