//! Versioned binary checkpoints (`MSEG`).
//!
//! Layout, little-endian: magic `MSEG`, `u32` format version, `u64`
//! architecture hash, `u32` tensor count, then per tensor: `u32` name
//! length, UTF-8 name, `u32` rank, `u32` per dimension, `f64` values.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{arch_descriptor, MiniSegNet};
use crate::error::{Error, Result};
use crate::io::Reader;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSEG";
pub const VERSION: u32 = 1;

pub fn arch_hash() -> u64 {
    let d = Sha256::digest(arch_descriptor().as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl MiniSegNet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.named_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&arch_hash().to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        if r.u64()? != arch_hash() {
            return Err(Error::Format("checkpoint architecture hash mismatch".into()));
        }
        let count = r.u32()? as usize;
        let mut net = MiniSegNet::init(0);
        let expected: Vec<(String, Vec<usize>)> = net
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if count != expected.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} tensors, expected {}",
                expected.len()
            )));
        }
        let mut loaded = Vec::with_capacity(count);
        for (want_name, want_shape) in &expected {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if &name != want_name {
                return Err(Error::Format(format!("expected tensor {want_name}, found {name}")));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if &dims != want_shape {
                return Err(Error::Format(format!("{name}: dims {dims:?}, expected {want_shape:?}")));
            }
            let n: usize = dims.iter().product();
            let data = r.f64s(n)?;
            let t = Tensor::new(&dims, data)?;
            if !t.is_finite() {
                return Err(Error::Format(format!("{name}: non-finite values")));
            }
            loaded.push(t);
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let mut it = loaded.into_iter();
        for c in &mut net.convs {
            c.weight = it.next().expect("count checked");
            c.bias = it.next().expect("count checked");
        }
        for b in &mut net.bns {
            b.gamma = it.next().expect("count checked");
            b.beta = it.next().expect("count checked");
            b.running_mean = it.next().expect("count checked");
            b.running_std = it.next().expect("count checked");
            if b.running_std.data().iter().any(|&s| s <= 0.0) {
                return Err(Error::Format("running std must be positive".into()));
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> String {
        crate::io::sha256_hex(&self.to_bytes())
    }
}
