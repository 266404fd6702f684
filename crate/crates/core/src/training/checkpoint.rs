//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "RCAPCKPT"
//! version   u32
//! topology  u32 length + UTF-8
//! vocab     u64 vocabulary fingerprint (0 when no vocabulary applies)
//! epoch     u64
//! step      u64
//! loss      f64
//! meta      u32 count, then (u32 length + UTF-8 key, u32 length + UTF-8 value)
//! arrays    u32 count, then per array:
//!             u32 name length + UTF-8 name, u32 rank, rank x u64 dims,
//!             prod(dims) x f64
//! checksum  u64 FNV-1a over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RCAPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn vector(name: String, data: Vec<f64>) -> Self {
        Self {
            name,
            shape: vec![data.len()],
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub topology: String,
    pub vocab_hash: u64,
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(topology: String) -> Self {
        Self {
            version: VERSION,
            topology,
            vocab_hash: 0,
            epoch: 0,
            step: 0,
            loss: 0.0,
            meta: BTreeMap::new(),
            arrays: Vec::new(),
        }
    }

    /// Captures every parameter and buffer of `model` under its hierarchical name.
    pub fn from_model<M: Parameterized + ?Sized>(topology: String, model: &M) -> Self {
        let mut ckpt = Self::new(topology);
        let params = model.named_params().into_iter().map(|(n, p)| (n, &p.value));
        for (name, t) in params.chain(model.named_buffers()) {
            ckpt.arrays.push(NamedArray {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        }
        ckpt
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Copies arrays into `model`. `prefix` selects a sub-tree of the
    /// checkpoint (e.g. `"encoder"`) and is replaced by `model_prefix` when
    /// matching parameter names. Every model parameter must be present with
    /// an identical shape.
    pub fn load_params<M: Parameterized + ?Sized>(&self, model: &mut M, prefix: &str, model_prefix: &str) -> Result<()> {
        for (name, p) in model.named_params_mut() {
            p.value = self.matching(&name, p.value.shape(), prefix, model_prefix)?;
            p.zero_grad();
        }
        for (name, t) in model.named_buffers_mut() {
            *t = self.matching(&name, t.shape(), prefix, model_prefix)?;
        }
        Ok(())
    }

    fn matching(&self, name: &str, shape: &[usize], prefix: &str, model_prefix: &str) -> Result<Tensor> {
        let suffix = name.strip_prefix(model_prefix).unwrap_or(name);
        let key = format!("{prefix}{suffix}");
        let array = self
            .array(&key)
            .ok_or_else(|| Error::Topology(format!("checkpoint has no array {key:?}")))?;
        if array.shape != shape {
            return Err(Error::Topology(format!(
                "array {key:?} has shape {:?}, model expects {shape:?}",
                array.shape
            )));
        }
        Tensor::from_vec(&array.shape, array.data.clone())
    }

    /// Strict load: the topology descriptor must match exactly.
    pub fn load_into<M: Parameterized + ?Sized>(&self, model: &mut M, expected_topology: &str) -> Result<()> {
        if self.topology != expected_topology {
            return Err(Error::Topology(format!(
                "checkpoint topology `{}` does not match model `{expected_topology}`",
                self.topology
            )));
        }
        self.load_params(model, "", "")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_str(&mut out, &self.topology);
        out.extend_from_slice(&self.vocab_hash.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.loss.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_str(&mut out, &a.name);
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &a.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(r.corrupt_at(0, "bad magic; not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.corrupt_at(8, &format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        if bytes.len() < 8 {
            return Err(r.corrupt_at(bytes.len(), "missing checksum"));
        }
        let body_len = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_len..].try_into().expect("8 bytes"));
        let mut r = Reader {
            bytes: &bytes[..body_len],
            pos: 12,
        };
        let topology = r.string("topology")?;
        let vocab_hash = r.u64("vocab hash")?;
        let epoch = r.u64("epoch")?;
        let step = r.u64("step")?;
        let loss = f64::from_bits(r.u64("loss")?);
        let n_meta = r.u32("meta count")?;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let k = r.string("meta key")?;
            let v = r.string("meta value")?;
            meta.insert(k, v);
        }
        let n_arrays = r.u32("array count")?;
        let mut arrays = Vec::new();
        for _ in 0..n_arrays {
            let name = r.string("array name")?;
            let rank = r.u32("array rank")? as usize;
            if rank > 8 {
                return Err(r.corrupt(&format!("array {name:?} has implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("array dim")? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|c| c.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.corrupt(&format!("array {name:?} with shape {shape:?} exceeds the file")))?;
            let raw = r.take(count * 8, "array data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(r.corrupt(&format!("{} trailing bytes before checksum", r.remaining())));
        }
        let actual = fnv1a(&bytes[..body_len]);
        if actual != stored {
            return Err(Error::Corrupt {
                offset: body_len,
                message: format!("checksum mismatch: stored {stored:016x}, computed {actual:016x}"),
            });
        }
        Ok(Self {
            version,
            topology,
            vocab_hash,
            epoch,
            step,
            loss,
            meta,
            arrays,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn corrupt(&self, message: &str) -> Error {
        self.corrupt_at(self.pos, message)
    }

    fn corrupt_at(&self, offset: usize, message: &str) -> Error {
        Error::Corrupt {
            offset,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.corrupt(&format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let start = self.pos;
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.corrupt_at(start, &format!("{what} is not UTF-8")))
    }
}
