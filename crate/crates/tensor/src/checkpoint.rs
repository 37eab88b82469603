//! Flat little-endian container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "VXGCKPT1"
//! version      u32       currently 1
//! config_hash  32 bytes
//! epoch        u64
//! step         u64
//! n_meta       u32
//!   key_len u32, key utf-8, value_len u32, value utf-8       (n_meta times)
//! n_entries    u32
//!   name_len u32, name utf-8, dtype u8 (1 = f32, 2 = f64),
//!   ndim u8, dims u64 x ndim, raw values                     (n_entries times)
//! ```
//!
//! Values are stored as their exact bit patterns, so a save/load round trip
//! is lossless.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"VXGCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl Entry {
    pub fn from_tensor<T: Element>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size_bytes());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Entry {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(TensorError::Checkpoint(format!(
                "entry {:?} holds {} but {} was requested",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let w = T::DTYPE.size_bytes();
        let data = self.bytes.chunks_exact(w).map(T::read_le).collect();
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub epoch: u64,
    pub step: u64,
    pub metadata: BTreeMap<String, String>,
    entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32], epoch: u64, step: u64) -> Self {
        Checkpoint {
            config_hash,
            epoch,
            step,
            ..Default::default()
        }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Adds or replaces the entry called `name`.
    pub fn put<T: Element>(&mut self, name: &str, t: &Tensor<T>) {
        let e = Entry::from_tensor(name, t);
        match self.entries.iter_mut().find(|x| x.name == name) {
            Some(slot) => *slot = e,
            None => self.entries.push(e),
        }
    }

    pub fn get<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        self.entry(name)
            .ok_or_else(|| TensorError::Checkpoint(format!("missing entry {:?}", name)))?
            .to_tensor()
    }

    /// Stores every parameter value under its own name.
    pub fn put_params<T: Element>(&mut self, params: &ParamStore<T>) {
        for (_, p) in params.iter() {
            self.put(&p.name, &p.value);
        }
    }

    /// Loads every parameter of `params` from the entry with the same name.
    /// Missing entries and shape differences are errors.
    pub fn load_params<T: Element>(&self, params: &mut ParamStore<T>) -> Result<()> {
        let names: Vec<String> = params.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let t = self.get::<T>(&name)?;
            params.assign(&name, t).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.name);
            out.push(e.dtype.tag());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {}", version)));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32)?);
        let epoch = r.u64()?;
        let step = r.u64()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| TensorError::Checkpoint(format!("entry {:?}: unknown dtype tag {}", name, tag)))?;
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| TensorError::Checkpoint("dimension overflow".into()))?);
            }
            let len = numel(&shape)
                .checked_mul(dtype.size_bytes())
                .ok_or_else(|| TensorError::Checkpoint("entry size overflow".into()))?;
            let bytes = r.take(len)?.to_vec();
            entries.push(Entry { name, dtype, shape, bytes });
        }
        if r.pos != bytes.len() {
            return Err(TensorError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config_hash,
            epoch,
            step,
            metadata,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            TensorError::Checkpoint(format!("truncated at byte {} (wanted {} more)", self.pos, n))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| TensorError::Checkpoint("non-utf8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let mut c = Checkpoint::new([7; 32], 3, 99);
        c.metadata.insert("best".into(), "0.5".into());
        let a = Tensor::<f32>::new(vec![3], vec![f32::MIN_POSITIVE, -0.0, 1.0 / 3.0]).unwrap();
        let b = Tensor::<f64>::new(vec![1, 2], vec![std::f64::consts::PI, -1e-300]).unwrap();
        c.put("a", &a);
        c.put("b", &b);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let a2 = back.get::<f32>("a").unwrap();
        assert!(a.data().iter().zip(a2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(back.get::<f32>("b").is_err());
    }

    #[test]
    fn truncation_and_magic_detected() {
        let mut c = Checkpoint::new([0; 32], 0, 0);
        c.put("w", &Tensor::<f32>::ones(&[4]));
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
