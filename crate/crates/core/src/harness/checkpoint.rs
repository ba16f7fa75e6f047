//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "SARCKPT\0"
//! version    u32       1
//! hash       32 bytes  SHA-256 of the resolved run config
//! step       u64
//! count      u32
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, data f64 × prod(dims) }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"SARCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint was written for config hash {found}, run config hash is {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("checkpoint entry {0:?} does not match the network")]
    Entry(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub hash: [u8; 32],
    pub step: u64,
    pub entries: Vec<(String, Tensor)>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, hash: [u8; 32], step: u64) -> Self {
        Self {
            hash,
            step,
            entries: store
                .entries()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.hash);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(mut bytes: &[u8]) -> Result<Self, CheckpointError> {
        fn take<'a>(b: &mut &'a [u8], n: usize) -> Result<&'a [u8], CheckpointError> {
            if b.len() < n {
                return Err(CheckpointError::Corrupt("truncated".into()));
            }
            let (head, tail) = b.split_at(n);
            *b = tail;
            Ok(head)
        }
        fn u32_(b: &mut &[u8]) -> Result<u32, CheckpointError> {
            Ok(u32::from_le_bytes(take(b, 4)?.try_into().unwrap()))
        }
        fn u64_(b: &mut &[u8]) -> Result<u64, CheckpointError> {
            Ok(u64::from_le_bytes(take(b, 8)?.try_into().unwrap()))
        }
        if take(&mut bytes, 8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32_(&mut bytes)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hash: [u8; 32] = take(&mut bytes, 32)?.try_into().unwrap();
        let step = u64_(&mut bytes)?;
        let count = u32_(&mut bytes)?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = u32_(&mut bytes)? as usize;
            let name = String::from_utf8(take(&mut bytes, len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("entry name is not utf-8".into()))?;
            let ndim = u32_(&mut bytes)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64_(&mut bytes)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut bytes, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            entries.push((name, t));
        }
        if !bytes.is_empty() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            hash,
            step,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn entry(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every entry into the store after checking the config hash and
    /// that names and shapes match exactly.
    pub fn restore(&self, store: &mut ParamStore, hash: [u8; 32]) -> Result<(), CheckpointError> {
        if self.hash != hash {
            return Err(CheckpointError::HashMismatch {
                expected: hex(&hash),
                found: hex(&self.hash),
            });
        }
        if self.entries.len() != store.len() {
            return Err(CheckpointError::Entry(format!(
                "{} entries for {} parameters",
                self.entries.len(),
                store.len()
            )));
        }
        for (name, t) in &self.entries {
            let id = store.id_of(name).ok_or_else(|| CheckpointError::Entry(name.clone()))?;
            store
                .set(id, t.clone())
                .map_err(|_| CheckpointError::Entry(name.clone()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamGroup;

    #[test]
    fn round_trip_and_restore() {
        let mut store = ParamStore::new();
        store.add("a.w", ParamGroup::Actor, Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap());
        store.add("g", ParamGroup::Generator, Tensor::scalar(-0.5));
        let ck = Checkpoint::from_store(&store, [7; 32], 42);
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        let mut other = store.clone();
        other.set(other.id_of("g").unwrap(), Tensor::scalar(9.0)).unwrap();
        back.restore(&mut other, [7; 32]).unwrap();
        assert_eq!(other.get(other.id_of("g").unwrap()).item(), -0.5);
        assert!(matches!(back.restore(&mut other, [8; 32]), Err(CheckpointError::HashMismatch { .. })));
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Checkpoint::decode(b"nonsense-bytes-xx"), Err(CheckpointError::BadMagic)));
        let mut store = ParamStore::new();
        store.add("x", ParamGroup::Actor, Tensor::scalar(1.0));
        let mut bytes = Checkpoint::from_store(&store, [0; 32], 0).encode();
        bytes.pop();
        assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::Corrupt(_))));
    }
}
