//! Keyed binary archive of parameters, optimizer state and counters.
//!
//! Layout (little endian): magic `PLCK`, `u32` version, `u32` entry count,
//! then per entry a length-prefixed UTF-8 key, a kind byte and the payload.
//! Arrays are stored as `f64` with their shape; counters as `u64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{LabError, Result};
use crate::numerics::{Real, Tensor};

use super::Agent;

const MAGIC: &[u8; 4] = b"PLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Array { shape: Vec<usize>, data: Vec<f64> },
    Counter(u64),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: BTreeMap<String, Entry>,
}

impl Archive {
    fn array<T: Real>(&mut self, key: String, shape: &[usize], data: &[T]) {
        self.entries.insert(
            key,
            Entry::Array {
                shape: shape.to_vec(),
                data: data.iter().map(|x| x.as_f64()).collect(),
            },
        );
    }

    pub fn counter(&self, key: &str) -> Option<u64> {
        match self.entries.get(key) {
            Some(Entry::Counter(c)) => Some(*c),
            _ => None,
        }
    }

    pub fn set_counter(&mut self, key: impl Into<String>, value: u64) {
        self.entries.insert(key.into(), Entry::Counter(value));
    }

    fn get_array(&self, key: &str) -> Result<(&[usize], &[f64])> {
        match self.entries.get(key) {
            Some(Entry::Array { shape, data }) => Ok((shape, data)),
            _ => Err(LabError::Format(format!("checkpoint lacks array '{key}'"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (key, entry) in &self.entries {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            match entry {
                Entry::Array { shape, data } => {
                    out.push(0);
                    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                    for &d in shape {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
                    for x in data {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Entry::Counter(c) => {
                    out.push(1);
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(LabError::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(LabError::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = read_u32(&mut r)?;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let klen = read_u32(&mut r)? as usize;
            if klen > r.len() {
                return Err(LabError::Format("truncated key".into()));
            }
            let key = String::from_utf8(r[..klen].to_vec())
                .map_err(|_| LabError::Format("key is not UTF-8".into()))?;
            r = &r[klen..];
            let mut kind = [0u8; 1];
            read_exact(&mut r, &mut kind)?;
            let entry = match kind[0] {
                0 => {
                    let rank = read_u32(&mut r)? as usize;
                    let shape = (0..rank)
                        .map(|_| read_u64(&mut r).map(|d| d as usize))
                        .collect::<Result<Vec<_>>>()?;
                    let len = read_u64(&mut r)? as usize;
                    if len.saturating_mul(8) > r.len() {
                        return Err(LabError::Format(format!("truncated array '{key}'")));
                    }
                    let data = (0..len)
                        .map(|_| read_u64(&mut r).map(f64::from_bits))
                        .collect::<Result<Vec<_>>>()?;
                    Entry::Array { shape, data }
                }
                1 => Entry::Counter(read_u64(&mut r)?),
                k => return Err(LabError::Format(format!("unknown entry kind {k}"))),
            };
            entries.insert(key, entry);
        }
        if !r.is_empty() {
            return Err(LabError::Format("trailing bytes after last entry".into()));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(r: &mut &[u8], out: &mut [u8]) -> Result<()> {
    r.read_exact(out)
        .map_err(|_| LabError::Format("unexpected end of checkpoint".into()))
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

impl<T: Real> Agent<T> {
    /// Captures every parameter, its initial snapshot, Adam moments,
    /// power-iteration vectors and the update counter.
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        for id in self.store.ids() {
            let slot = self.store.slot(id);
            let name = &slot.param.name;
            let v = &slot.param.value;
            a.array(format!("param/{name}"), v.shape(), v.data());
            a.array(format!("param_init/{name}"), v.shape(), slot.param.initial_value().data());
            if let Some(s) = &slot.adam {
                a.array(format!("adam_m/{name}"), v.shape(), &s.m);
                a.array(format!("adam_v/{name}"), v.shape(), &s.v);
                a.set_counter(format!("adam_t/{name}"), s.t);
            }
            if let Some(u) = &slot.sn_u {
                a.array(format!("sn_u/{name}"), &[u.len()], u);
            }
        }
        a.set_counter("counter/updates", self.updates());
        a
    }

    /// Restores state saved by [`Agent::to_archive`] into an agent with the
    /// same architecture.
    pub fn restore(&mut self, a: &Archive) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id).to_string();
            let (shape, data) = a.get_array(&format!("param/{name}"))?;
            let value = to_tensor::<T>(shape, data)?;
            let (ishape, idata) = a.get_array(&format!("param_init/{name}"))?;
            let initial = to_tensor::<T>(ishape, idata)?;
            let slot = self.store.slot_mut(id);
            if value.shape() != slot.param.value.shape() {
                return Err(LabError::Format(format!("shape mismatch for '{name}'")));
            }
            slot.param = crate::numerics::Parameter::with_initial(name.clone(), value, initial);
            if let Some(s) = slot.adam.as_mut() {
                s.m = a.get_array(&format!("adam_m/{name}"))?.1.iter().map(|&x| T::lit(x)).collect();
                s.v = a.get_array(&format!("adam_v/{name}"))?.1.iter().map(|&x| T::lit(x)).collect();
                s.t = a
                    .counter(&format!("adam_t/{name}"))
                    .ok_or_else(|| LabError::Format(format!("missing adam_t for '{name}'")))?;
            }
            if slot.sn_u.is_some() {
                slot.sn_u = Some(a.get_array(&format!("sn_u/{name}"))?.1.iter().map(|&x| T::lit(x)).collect());
            }
        }
        self.set_updates(a.counter("counter/updates").unwrap_or(0));
        Ok(())
    }
}

fn to_tensor<T: Real>(shape: &[usize], data: &[f64]) -> Result<Tensor<T>> {
    Tensor::new(shape.to_vec(), data.iter().map(|&x| T::lit(x)).collect())
}
