//! Versioned binary checkpoint container.
//!
//! ```text
//! magic    8 bytes  "KNETCKPT"
//! version  u32 LE
//! header   u32 LE length + JSON (network config, channel order, counters)
//! count    u32 LE
//! tensors  count x { u32 name length, UTF-8 name, u64 value count, f64 LE values }
//! ```
//!
//! Readers accept any version up to [`FORMAT_VERSION`] and ignore unknown
//! header fields and unknown tensors.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Network, NetworkConfig, CHANNEL_ORDER};
use crate::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"KNETCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    channel_order: String,
    network: NetworkConfig,
    step: u64,
    epoch: u64,
    #[serde(default)]
    optimizer_step: Option<u64>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    /// Optimizer updates performed so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub optimizer: Option<AdamState>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Self { network, step: 0, epoch: 0, optimizer: None, metadata: BTreeMap::new() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            channel_order: CHANNEL_ORDER.to_string(),
            network: self.network.config.clone(),
            step: self.step,
            epoch: self.epoch,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut tensors: Vec<(String, &[f64])> = self.network.named_tensors();
        if let Some(opt) = &self.optimizer {
            let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
            for (n, m) in names.iter().zip(&opt.m) {
                tensors.push((format!("optimizer.m.{n}"), m));
            }
            for (n, v) in names.iter().zip(&opt.v) {
                tensors.push((format!("optimizer.v.{n}"), v));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, values) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version == 0 || version > FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = read_u32(&mut r)? as usize;
        let mut hbytes = vec![0u8; hlen];
        read_exact(&mut r, &mut hbytes)?;
        let header: Header = serde_json::from_slice(&hbytes)?;
        if header.channel_order != CHANNEL_ORDER {
            return Err(Error::Checkpoint(format!("unsupported channel order `{}`", header.channel_order)));
        }
        let count = read_u32(&mut r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; nlen];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let len = read_u64(&mut r)? as usize;
            if len.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(Error::Checkpoint(format!("tensor `{name}` is truncated")));
            }
            let mut values = Vec::with_capacity(len);
            for chunk in r[..len * 8].chunks_exact(8) {
                values.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
            }
            r = &r[len * 8..];
            tensors.insert(name, values);
        }

        let mut network = Network::zeros(header.network)?;
        let mut names = Vec::new();
        for (name, slot) in network.named_tensors_mut() {
            let values = tensors
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if values.len() != slot.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has {} values, expected {}",
                    values.len(),
                    slot.len()
                )));
            }
            *slot = values;
            names.push(name);
        }
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let mut take = |prefix: &str| -> Result<Vec<Vec<f64>>> {
                    names
                        .iter()
                        .map(|n| {
                            tensors
                                .remove(&format!("{prefix}{n}"))
                                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor for `{n}`")))
                        })
                        .collect()
                };
                let m = take("optimizer.m.")?;
                let v = take("optimizer.v.")?;
                Some(AdamState { step, m, v })
            }
            None => None,
        };
        Ok(Self { network, step: header.step, epoch: header.epoch, optimizer, metadata: header.metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
