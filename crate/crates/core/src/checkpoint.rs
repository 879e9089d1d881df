//! Versioned binary container for trained parameters.
//!
//! Layout (little-endian):
//! `b"SCCKPT\0\0"`, u32 format version, u64 header length, JSON header,
//! raw f32 tensor data in header order, 32-byte SHA-256 of everything before it.
//! The header records a kind tag, the producing config, an optional rng
//! position and every tensor's name and shape, so loading is bit-exact.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Module, Tensor};
use crate::rng::RngState;

pub const MAGIC: &[u8; 8] = b"SCCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    rng: Option<RngState>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub rng: Option<RngState>,
    pub tensors: Vec<(TensorEntry, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Checkpoint { kind: kind.into(), config: serde_json::to_value(config)?, rng: None, tensors: Vec::new() })
    }

    pub fn with_rng(mut self, state: RngState) -> Self {
        self.rng = Some(state);
        self
    }

    /// Appends every parameter of `m`, names prefixed by `prefix`.
    pub fn add_module<M: Module>(mut self, prefix: &str, m: &M) -> Self {
        m.visit(prefix, &mut |n, t| {
            self.tensors.push((TensorEntry { name: n.to_string(), shape: t.shape().to_vec() }, t.to_vec()));
        });
        self
    }

    pub fn add_raw(mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Self {
        self.tensors.push((TensorEntry { name: name.into(), shape: shape.to_vec() }, data));
        self
    }

    pub fn raw(&self, name: &str) -> Option<&(TensorEntry, Vec<f32>)> {
        self.tensors.iter().find(|(e, _)| e.name == name)
    }

    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!("checkpoint holds '{}', expected '{kind}'", self.kind)));
        }
        Ok(())
    }

    /// Overwrites every parameter of `m` (under `prefix`) with the stored
    /// values. Missing names or shape changes are errors.
    pub fn load_module<M: Module>(&self, prefix: &str, m: &mut M) -> Result<()> {
        let mut err = None;
        m.visit_mut(prefix, &mut |n, t| {
            if err.is_some() {
                return;
            }
            match self.raw(n) {
                Some((e, data)) if e.shape == t.shape() => *t = Tensor::param(&e.shape, data.clone()),
                Some((e, _)) => err = Some(Error::shape(format!("{n} {:?}", t.shape()), format!("{:?}", e.shape))),
                None => err = Some(Error::Format(format!("checkpoint has no tensor '{n}'"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for (e, d) in &self.tensors {
            if e.shape.iter().product::<usize>() != d.len() {
                return Err(Error::shape(format!("{} {:?}", e.name, e.shape), d.len()));
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            rng: self.rng.clone(),
            tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
        };
        let hj = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(hj.len() + 64 + self.tensors.iter().map(|t| 4 * t.1.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hj.len() as u64).to_le_bytes());
        out.extend_from_slice(&hj);
        for (_, d) in &self.tensors {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < 8 + 4 + 8 + 32 || &b[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let (body, digest) = b.split_at(b.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|e| *e <= body.len()).ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&body[20..hend])?;
        let mut pos = hend;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = pos + 4 * n;
            if end > body.len() {
                return Err(Error::Format(format!("tensor '{}' runs past the end", e.name)));
            }
            let data = body[pos..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            pos = end;
            tensors.push((e, data));
        }
        if pos != body.len() {
            return Err(Error::Format("trailing bytes after tensor data".into()));
        }
        Ok(Checkpoint { kind: header.kind, config: header.config, rng: header.rng, tensors })
    }

    /// Writes via a temporary sibling and rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
