//! Binary checkpoint format.
//!
//! ```text
//! b"LFCK" | u32 version | u64 header length | JSON header | f32 payload
//! ```
//!
//! All integers and floats are little-endian. The header holds the
//! architecture descriptor, an index of named tensors with their payload
//! offsets (in bytes), and free-form training metadata.

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"LFCK";
pub const VERSION: u32 = 1;

/// Identifies the architecture a set of tensors belongs to.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Descriptor {
    pub kind: String,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
struct Header {
    descriptor: Descriptor,
    tensors: Vec<IndexEntry>,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub descriptor: Descriptor,
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn of<N: Network>(net: &N, meta: serde_json::Value) -> Self {
        let config = serde_json::to_value(net.config()).expect("configs serialize");
        Checkpoint {
            descriptor: Descriptor {
                kind: N::KIND.to_string(),
                config,
            },
            tensors: net.store().named_tensors(),
            meta,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = IndexEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    offset,
                };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let header = Header {
            descriptor: self.descriptor.clone(),
            tensors,
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CorruptCheckpoint(format!(
                "unsupported version {version}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let payload_start = usize::try_from(header_len)
            .ok()
            .and_then(|h| h.checked_add(16))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("header extends past end of file"))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| Error::CorruptCheckpoint(format!("unreadable header: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor `{}` has unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            if e.offset != expected {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor `{}` offset {} overlaps or leaves a gap",
                    e.name, e.offset
                )));
            }
            let numel: usize = e.shape.iter().product();
            let end = e.offset + 4 * numel as u64;
            if end > payload.len() as u64 {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor `{}` runs past end of payload",
                    e.name
                )));
            }
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
            expected = end;
        }
        if expected != payload.len() as u64 {
            return Err(corrupt("trailing bytes after payload"));
        }
        Ok(Checkpoint {
            descriptor: header.descriptor,
            tensors,
            meta: header.meta,
        })
    }

    /// Rebuilds the network the descriptor names and binds the weights.
    pub fn into_network<N: Network>(self) -> Result<(N, serde_json::Value)> {
        if self.descriptor.kind != N::KIND {
            return Err(Error::DescriptorMismatch(format!(
                "checkpoint holds `{}`, expected `{}`",
                self.descriptor.kind,
                N::KIND
            )));
        }
        let config: N::Config = serde_json::from_value(self.descriptor.config).map_err(|e| {
            Error::DescriptorMismatch(format!("config does not match `{}`: {e}", N::KIND))
        })?;
        let mut net = N::build(&config, 0)?;
        net.store_mut().load_named(&self.tensors)?;
        Ok((net, self.meta))
    }
}

pub fn save_checkpoint<N: Network>(net: &N, meta: serde_json::Value, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, Checkpoint::of(net, meta).to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads and rebuilds a network, returning it with the stored metadata.
pub fn load_network<N: Network>(path: &Path) -> Result<(N, serde_json::Value)> {
    load_checkpoint(path)?.into_network()
}
