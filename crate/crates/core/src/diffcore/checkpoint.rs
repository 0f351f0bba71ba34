//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  content
//! 0       8     magic  b"LIPVICKP"
//! 8       4     u32    header length H in bytes
//! 12      H     UTF-8 JSON header
//! 12+H    ...   payload: f64 LE values
//! ```
//!
//! The header is
//! `{"format_version":1,"kind":...,"nets":[{"layer_sizes":[..],"activation":"relu"|"tanh","seed":N}],"extra":{..}}`.
//! The payload stores the nets in header order; within a net, each layer
//! contributes its weight matrix (`out x in`, row-major) followed by its bias.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::mlp::{Activation, Dense, MlpParams};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LIPVICKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetMeta {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    nets: Vec<NetMeta>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// A set of networks plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub nets: Vec<MlpParams>,
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, nets: Vec<MlpParams>) -> Self {
        Checkpoint {
            kind: kind.into(),
            nets,
            extra: serde_json::Value::Null,
        }
    }

    pub fn with_extra(mut self, extra: serde_json::Value) -> Self {
        self.extra = extra;
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            nets: self
                .nets
                .iter()
                .map(|n| NetMeta {
                    layer_sizes: n.layer_sizes(),
                    activation: n.activation(),
                    seed: n.seed(),
                })
                .collect(),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for net in &self.nets {
            for v in net.flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            what: "checkpoint",
            detail: detail.to_string(),
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.format_version)));
        }
        let mut payload = bytes[12 + hlen..].chunks_exact(8);
        if payload.remainder().len() != 0 {
            return Err(bad("payload not a whole number of f64"));
        }
        let mut take = |n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| {
                    payload
                        .next()
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .ok_or_else(|| bad("truncated payload"))
                })
                .collect()
        };
        let mut nets = Vec::with_capacity(header.nets.len());
        for meta in &header.nets {
            if meta.layer_sizes.len() < 2 {
                return Err(Error::InvalidLayerSizes(meta.layer_sizes.clone()));
            }
            let mut layers = Vec::new();
            for w in meta.layer_sizes.windows(2) {
                let weight = Matrix::from_vec(w[1], w[0], take(w[0] * w[1])?)?;
                let bias = take(w[1])?;
                layers.push(Dense { weight, bias });
            }
            nets.push(MlpParams::from_layers(layers, meta.activation, meta.seed)?);
        }
        if payload.next().is_some() {
            return Err(bad("trailing payload"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            nets,
            extra: header.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
