//! `AFLB1` checkpoint files.
//!
//! Layout (all integers little-endian `u64` unless noted):
//! magic `AFLB1`, scalar width byte (4 or 8), entry count, then per entry
//! name length, UTF-8 name, rank, dims, raw little-endian values.
//! Parameters are stored under their own names, Adam state under
//! `adam.t`, `adam.m/<name>`, `adam.v/<name>`, and batchnorm running
//! statistics under `bn/<layer>/mean` and `bn/<layer>/var`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{BufferStore, ParamStore};
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"AFLB1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(params: &ParamStore<T>, buffers: &BufferStore<T>, adam: Option<&AdamState<T>>) -> Self {
        let mut entries: Vec<(String, Tensor<T>)> =
            params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        if let Some(adam) = adam {
            entries.push(("adam.t".into(), Tensor::scalar(T::lit(adam.t as f64))));
            for ((name, _), (m, v)) in params.iter().zip(adam.m.iter().zip(&adam.v)) {
                entries.push((format!("adam.m/{name}"), m.clone()));
                entries.push((format!("adam.v/{name}"), v.clone()));
            }
        }
        for stats in buffers.iter() {
            if let (Some(mean), Some(var)) = (&stats.mean, &stats.var) {
                let c = mean.len();
                entries.push((format!("bn/{}/mean", stats.name), Tensor::from_parts(vec![c], mean.clone())));
                entries.push((format!("bn/{}/var", stats.name), Tensor::from_parts(vec![c], var.clone())));
            }
        }
        Checkpoint { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copy stored values into an already-constructed model of the same layout.
    /// Returns the Adam state when one was saved.
    pub fn restore(
        &self,
        params: &mut ParamStore<T>,
        buffers: &mut BufferStore<T>,
        adam_config: AdamConfig,
    ) -> Result<Option<AdamState<T>>> {
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let stored = self.get(name).ok_or_else(|| Error::Format(format!("checkpoint has no parameter '{name}'")))?;
            let slot = &mut params.values_mut()[i];
            if stored.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "parameter '{name}': stored shape {:?}, model expects {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored.clone();
        }
        for stats in buffers.iter_mut() {
            let mean = self.get(&format!("bn/{}/mean", stats.name));
            let var = self.get(&format!("bn/{}/var", stats.name));
            if let (Some(mean), Some(var)) = (mean, var) {
                stats.mean = Some(mean.data().to_vec());
                stats.var = Some(var.data().to_vec());
            }
        }
        let Some(t) = self.get("adam.t") else { return Ok(None) };
        let mut adam = AdamState::new(params, adam_config);
        adam.t = t.item()?.as_f64() as u64;
        for (i, name) in names.iter().enumerate() {
            let m = self.get(&format!("adam.m/{name}"));
            let v = self.get(&format!("adam.v/{name}"));
            match (m, v) {
                (Some(m), Some(v)) if m.shape() == adam.m[i].shape() && v.shape() == adam.v[i].shape() => {
                    adam.m[i] = m.clone();
                    adam.v[i] = v.clone();
                }
                _ => return Err(Error::Format(format!("checkpoint Adam state for '{name}' missing or misshapen"))),
            }
        }
        Ok(Some(adam))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(T::WIDTH as u8);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an AFLB1 checkpoint (bad magic)".into()));
        }
        let width = r.take(1)?[0] as usize;
        if width != T::WIDTH {
            return Err(Error::Format(format!(
                "checkpoint stores {width}-byte scalars, loader expects {}",
                T::WIDTH
            )));
        }
        let count = r.u64()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u64()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("checkpoint entry name is not UTF-8".into()))?;
            let rank = r.u64()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(width).ok_or_else(|| Error::Format("entry too large".into()))?)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(format!("entry '{name}': {e}")))?;
            entries.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint entries".into()));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
