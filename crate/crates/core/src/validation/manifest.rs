//! Manifest files: published tests and expected outputs.
//!
//! Layout: one line of compact JSON, then the test inputs as one
//! little-endian `f32` blob. The header's last field is
//! `"hash":"<hex sha256>"`; the hash covers the header line with that field
//! removed, followed by the blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::model_hash;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::testgen::GeneratedSuite;

pub const MANIFEST_FORMAT: &str = "paramcover-manifest";
pub const MANIFEST_VERSION: u32 = 1;
const HASH_ALG: &str = "sha256";

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Hash of the vendor model's PCNM serialization.
    pub model_hash: String,
    pub input_shape: Vec<usize>,
    pub inputs: Vec<Tensor<f32>>,
    /// Labels the vendor model predicts for `inputs`.
    pub labels: Vec<usize>,
    pub logits: Option<Vec<Vec<f32>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    model_hash: String,
    test_count: usize,
    input_shape: Vec<usize>,
    labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logits: Option<Vec<Vec<f32>>>,
    hash_alg: String,
}

/// Records `net`'s outputs on every test of `suite`.
///
/// Tests are stored as `f32`; the expected outputs are computed on the
/// stored values so that they reproduce exactly on load.
pub fn make_manifest<T: Scalar>(
    net: &Network<T>,
    suite: &GeneratedSuite<T>,
    with_logits: bool,
) -> Result<Manifest> {
    let inputs: Vec<Tensor<f32>> = suite.inputs().map(Tensor::cast).collect();
    Manifest::from_inputs(net, inputs, with_logits)
}

impl Manifest {
    pub fn from_inputs<T: Scalar>(
        net: &Network<T>,
        inputs: Vec<Tensor<f32>>,
        with_logits: bool,
    ) -> Result<Self> {
        let Some(first) = inputs.first() else {
            return Err(Error::InvalidConfig(
                "manifest needs at least one test".into(),
            ));
        };
        let input_shape = first.shape().to_vec();
        let mut labels = Vec::with_capacity(inputs.len());
        let mut logits = Vec::with_capacity(inputs.len());
        for x in &inputs {
            if x.shape() != input_shape.as_slice() {
                return Err(Error::Corrupt(format!(
                    "test shape {:?} differs from {:?}",
                    x.shape(),
                    input_shape
                )));
            }
            let l = net.logits(x.cast::<T>().as_slice())?;
            labels.push(crate::nn::argmax(&l));
            if with_logits {
                logits.push(l.iter().map(|v| v.to_f32_lossy()).collect());
            }
        }
        Ok(Self {
            model_hash: model_hash(&net.cast::<f32>()),
            input_shape,
            inputs,
            labels,
            logits: with_logits.then_some(logits),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// The first `n` tests (or all, if fewer).
    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            model_hash: self.model_hash.clone(),
            input_shape: self.input_shape.clone(),
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            logits: self.logits.as_ref().map(|l| l[..n].to_vec()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            model_hash: self.model_hash.clone(),
            test_count: self.len(),
            input_shape: self.input_shape.clone(),
            labels: self.labels.clone(),
            logits: self.logits.clone(),
            hash_alg: HASH_ALG.into(),
        };
        let body = serde_json::to_string(&header)?;
        let blob: Vec<u8> = self
            .inputs
            .iter()
            .flat_map(|x| x.as_slice().iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        let hash = digest(body.as_bytes(), &blob);
        let open = body.strip_suffix('}').expect("JSON object");
        let mut out = format!("{open},\"hash\":\"{hash}\"}}\n").into_bytes();
        out.extend_from_slice(&blob);
        Ok(out)
    }

    /// Parses and verifies a manifest. Any change to the bytes makes this fail.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Corrupt("manifest header is not terminated".into()))?;
        let line = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::Corrupt(e.to_string()))?;
        let blob = &bytes[nl + 1..];

        let (open, stored) = split_hash(line)?;
        let body = format!("{open}}}");
        let computed = digest(body.as_bytes(), blob);
        if stored != computed {
            return Err(Error::Integrity {
                stored: stored.into(),
                computed,
            });
        }

        let h: Header = serde_json::from_str(&body)?;
        if h.format != MANIFEST_FORMAT || h.version != MANIFEST_VERSION {
            return Err(Error::Version(format!("{} v{}", h.format, h.version)));
        }
        if h.hash_alg != HASH_ALG {
            return Err(Error::Version(format!("hash algorithm {}", h.hash_alg)));
        }
        if h.labels.len() != h.test_count {
            return Err(Error::Corrupt(format!(
                "{} labels for {} tests",
                h.labels.len(),
                h.test_count
            )));
        }
        if h.logits.as_ref().is_some_and(|l| l.len() != h.test_count) {
            return Err(Error::Corrupt("logit count differs from test count".into()));
        }
        let numel: usize = h.input_shape.iter().product();
        if blob.len() != h.test_count * numel * 4 {
            return Err(Error::Corrupt(format!(
                "input blob has {} bytes, expected {}",
                blob.len(),
                h.test_count * numel * 4
            )));
        }
        let values: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        let inputs = if numel == 0 {
            vec![Tensor::new(h.input_shape.clone(), vec![])?; h.test_count]
        } else {
            values
                .chunks(numel)
                .map(|c| Tensor::new(h.input_shape.clone(), c.to_vec()))
                .collect::<Result<_>>()?
        };
        Ok(Self {
            model_hash: h.model_hash,
            input_shape: h.input_shape,
            inputs,
            labels: h.labels,
            logits: h.logits,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn digest(header: &[u8], blob: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(header);
    h.update(blob);
    hex::encode(h.finalize())
}

/// Splits `{...,"hash":"<hex>"}` into `{...` and `<hex>`.
fn split_hash(line: &str) -> Result<(&str, &str)> {
    const KEY: &str = ",\"hash\":\"";
    let corrupt = || Error::Corrupt("manifest header does not end with its hash".into());
    let rest = line.strip_suffix("\"}").ok_or_else(corrupt)?;
    let at = rest.rfind(KEY).ok_or_else(corrupt)?;
    let hash = &rest[at + KEY.len()..];
    if hash.len() != 64
        || !hash
            .bytes()
            .all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
    {
        return Err(corrupt());
    }
    Ok((&rest[..at], hash))
}
