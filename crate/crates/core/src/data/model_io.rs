//! PCNM v1 model files.
//!
//! Layout: the line `PCNM v1`, then a single-line JSON header, then the
//! parameter blobs. Each dense layer contributes one blob holding its weights
//! (row-major) followed by its biases as little-endian `f32`. The header
//! records every blob's byte offset (relative to the first blob byte) and
//! length.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Activation, Layer, LayerSpec, Network};

pub const PCNM_MAGIC: &str = "PCNM v1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    input_dim: usize,
    seed: u64,
    param_count: usize,
    layers: Vec<HeaderLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum HeaderLayer {
    Dense {
        #[serde(rename = "in")]
        in_dim: usize,
        out: usize,
        offset: usize,
        length: usize,
    },
    Activation {
        function: Activation,
    },
}

pub fn model_to_bytes(net: &Network<f32>) -> Vec<u8> {
    let mut layers = Vec::new();
    let mut blob_offset = 0;
    for layer in net.layers() {
        match *layer {
            Layer::Dense(d) => {
                let length = d.param_count() * 4;
                layers.push(HeaderLayer::Dense {
                    in_dim: d.in_dim,
                    out: d.out_dim,
                    offset: blob_offset,
                    length,
                });
                blob_offset += length;
            }
            Layer::Activation(function) => layers.push(HeaderLayer::Activation { function }),
        }
    }
    let header = Header {
        format: "PCNM".into(),
        version: FORMAT_VERSION,
        input_dim: net.input_dim(),
        seed: net.seed(),
        param_count: net.param_count(),
        layers,
    };
    let header = serde_json::to_string(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PCNM_MAGIC.len() + header.len() + 2 + blob_offset);
    out.extend_from_slice(PCNM_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    // Parameters are stored layer by layer in flat order, so one pass suffices.
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let nl = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..nl], &bytes[nl + 1..]))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Network<f32>> {
    let (magic, rest) =
        split_line(bytes).ok_or_else(|| Error::Version("missing PCNM magic line".into()))?;
    if magic != PCNM_MAGIC.as_bytes() {
        return Err(Error::Version(format!(
            "expected {PCNM_MAGIC:?}, found {:?}",
            String::from_utf8_lossy(&magic[..magic.len().min(32)])
        )));
    }
    let (header, blob) =
        split_line(rest).ok_or_else(|| Error::Corrupt("missing PCNM header".into()))?;
    let header: Header = serde_json::from_slice(header)?;
    if header.format != "PCNM" || header.version != FORMAT_VERSION {
        return Err(Error::Version(format!(
            "{} v{}",
            header.format, header.version
        )));
    }

    let mut specs = Vec::with_capacity(header.layers.len());
    let mut expected_offset = 0;
    let mut dim = header.input_dim;
    for layer in &header.layers {
        match *layer {
            HeaderLayer::Dense {
                in_dim,
                out,
                offset,
                length,
            } => {
                if in_dim != dim {
                    return Err(Error::Corrupt(format!(
                        "dense layer input {in_dim} does not follow width {dim}"
                    )));
                }
                if offset != expected_offset || length != (in_dim * out + out) * 4 {
                    return Err(Error::Corrupt(format!(
                        "blob at offset {offset} with length {length} does not match layer {in_dim}x{out}"
                    )));
                }
                expected_offset += length;
                dim = out;
                specs.push(LayerSpec::Dense { out });
            }
            HeaderLayer::Activation { function } => specs.push(LayerSpec::Activation { function }),
        }
    }
    if expected_offset != header.param_count * 4 {
        return Err(Error::Corrupt(format!(
            "header declares {} parameters but layers hold {}",
            header.param_count,
            expected_offset / 4
        )));
    }
    if blob.len() != expected_offset {
        return Err(Error::Corrupt(format!(
            "blob length {} does not match declared {} bytes",
            blob.len(),
            expected_offset
        )));
    }
    let params = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut net = Network::from_params(header.input_dim, &specs, params)?;
    net.set_seed(header.seed);
    Ok(net)
}

pub fn save_model(net: &Network<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

/// Hex SHA-256 of the model's PCNM serialization.
pub fn model_hash(net: &Network<f32>) -> String {
    hex::encode(Sha256::digest(model_to_bytes(net)))
}
